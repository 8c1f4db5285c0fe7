use super::*;
use crate::env::{generate, TaskFamily, WarmstartConfig};
use crate::optim::AdamState;
use crate::pattern::Pattern;
use crate::policy::{init_params, scripted_policy, Precision};

fn tiny_config() -> RunConfig {
    let v = VocabSpec::default();
    let mut arch = default_arch(&v);
    arch.width = 8;
    arch.head_count = 2;
    arch.mlp_width = 16;
    arch.depth = 1;
    arch.precision = Precision::F64;
    RunConfig {
        seed: 5,
        arch,
        warmstart: WarmstartSpec {
            corpus: WarmstartConfig { examples_per_family: 20, ..WarmstartConfig::default() },
            epochs: 2,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        },
        train: TrainConfig { steps: 3, batch_size: 4, mini_batch_size: 2, m: 2, max_new: 6, ..TrainConfig::default() },
        eval: EvalConfig { problems_per_family: 4, k: 2, max_new: 6, ..EvalConfig::default() },
        ablation: AblationConfig { seeds: vec![1], kl_beta: 0.1 },
    }
}

fn tiny_policy(cfg: &RunConfig) -> crate::policy::PolicySnapshot {
    init_params(&cfg.arch, 3).unwrap()
}

/// Answers `TAG_D DELIM d EOS` to every seven-token prompt, with `digits`
/// giving the answer distribution.
fn scripted(digits: &[(u32, f64)]) -> crate::policy::PolicySnapshot {
    let v = VocabSpec::default();
    let arch = default_arch(&v);
    let script = vec![
        vec![(v.pattern_tags[0], 1.0)],
        vec![(v.answer_delim, 1.0)],
        digits.to_vec(),
        vec![(v.eos, 1.0)],
    ];
    scripted_policy(&arch, 6, &script).unwrap()
}

fn d1_problems(n: u64) -> Vec<crate::env::Problem> {
    let v = VocabSpec::default();
    (0..n)
        .flat_map(|s| TaskFamily::ALL.map(|f| generate(f, 1, 900 + s, &v).unwrap()))
        .collect()
}

fn settings(k: usize, temperature: f64) -> EvalSettings {
    EvalSettings { k, temperature, max_new: 6, seed: 11 }
}

#[test]
fn zero_step_training_is_identity() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let t = TrainConfig { steps: 0, ..cfg.train.clone() };
    let out = train(&t, &snap, None, 1, &VocabSpec::default(), None).unwrap();
    assert_eq!(out.snapshot.params, snap.params);
    assert!(out.metrics.is_empty() && out.selections.is_empty());
}

#[test]
fn training_logs_are_reproducible_and_worker_independent() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let v = VocabSpec::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = train(&cfg.train, &snap, None, 2, &v, None).unwrap();
            (to_jsonl(&out.metrics).unwrap(), to_jsonl(&out.selections).unwrap(), out.snapshot.params)
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(4));
    assert_eq!(a.0.lines().count(), cfg.train.steps);
    assert_eq!(a.1.lines().count(), cfg.train.steps * cfg.train.batch_size);
}

#[test]
fn training_moves_the_policy_and_counts_selections() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let out = train(&cfg.train, &snap, None, 2, &VocabSpec::default(), None).unwrap();
    for m in &out.metrics {
        let chosen: usize = m.chosen_pattern_histogram.values().sum();
        assert_eq!(chosen, cfg.train.batch_size);
        assert!(m.skipped_count <= cfg.train.batch_size);
        assert!((0.0..=1.0).contains(&m.train_reward));
    }
    let skipped: usize = out.metrics.iter().map(|m| m.skipped_count).sum();
    if skipped < cfg.train.steps * cfg.train.batch_size {
        assert_ne!(out.snapshot.params, snap.params);
    }
}

#[test]
fn every_algorithm_trains() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let v = VocabSpec::default();
    for variant in Variant::ALL {
        let t = variant_config(&cfg, variant);
        let out = train(&t, &snap, None, 4, &v, None).unwrap();
        assert_eq!(out.metrics.len(), t.steps);
        assert!(out.diagnostics.is_empty(), "{variant:?}: {:?}", out.diagnostics);
        assert!(out.metrics.iter().all(|m| m.objective.is_finite() && m.kl >= 0.0));
    }
}

#[test]
fn probes_follow_eval_every() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let v = VocabSpec::default();
    let held = held_out_problems(&cfg.eval.families, 2, cfg.seed, &v).unwrap();
    let s = eval_settings(&cfg);
    let t = TrainConfig { eval_every: 2, steps: 4, ..cfg.train.clone() };
    let out = train(&t, &snap, None, 1, &v, Some((&held, &s))).unwrap();
    let steps: Vec<u64> = out.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![2, 4]);
}

#[test]
fn step_problems_stay_below_held_out_range() {
    let cfg = tiny_config();
    let v = VocabSpec::default();
    let train_ids: Vec<String> =
        (0..20).flat_map(|s| step_problems(&cfg.train, 1, s, &v).unwrap()).map(|p| p.id).collect();
    let held = held_out_problems(&cfg.eval.families, 50, 1, &v).unwrap();
    for p in &held {
        assert!(!train_ids.contains(&p.id));
    }
    assert_eq!(step_problems(&cfg.train, 1, 0, &v).unwrap(), step_problems(&cfg.train, 1, 0, &v).unwrap());
}

#[test]
fn pass1_and_oracle_arithmetic() {
    let a = vec![vec![1, 0], vec![0, 0]];
    let b = vec![vec![0, 0], vec![1, 1]];
    assert_eq!(pass1_from(&a), 0.25);
    assert_eq!(pass1_from(&b), 0.5);
    assert_eq!(oracle_from(&[a.clone(), b]).unwrap(), 0.75);
    assert_eq!(oracle_from(&[a.clone()]).unwrap(), pass1_from(&a));
    assert!(oracle_from(&[]).is_err());
    assert!(oracle_from(&[a, vec![vec![1, 1]]]).is_err());
}

#[test]
fn deterministic_script_scores_golden_fraction() {
    let v = VocabSpec::default();
    let snap = scripted(&[(1, 1.0)]);
    let problems = d1_problems(40);
    let want = problems.iter().filter(|p| p.golden_answer == vec![1]).count() as f64 / problems.len() as f64;
    let got = evaluate_pass1(&snap, &problems, &settings(3, 0.6), &v).unwrap();
    assert_eq!(got, want);
    assert!(want > 0.0 && want < 1.0);
}

#[test]
fn stochastic_script_matches_expectation() {
    let v = VocabSpec::default();
    let q = [(0, 0.2), (1, 0.5), (2, 0.3)];
    let snap = scripted(&q);
    let problems = d1_problems(100);
    let k = 4;
    let probs: Vec<f64> = problems
        .iter()
        .map(|p| q.iter().find(|(d, _)| vec![*d] == p.golden_answer).map_or(0.0, |x| x.1))
        .collect();
    let n = problems.len() as f64;
    let mean = probs.iter().sum::<f64>() / n;
    let sd = (probs.iter().map(|p| p * (1.0 - p) / k as f64).sum::<f64>()).sqrt() / n;
    let got = evaluate_pass1(&snap, &problems, &settings(k, 1.0), &v).unwrap();
    assert!((got - mean).abs() <= 3.0 * sd, "{got} vs {mean} ± {sd}");
}

#[test]
fn report_rows_are_consistent() {
    let v = VocabSpec::default();
    let snap = scripted(&[(0, 0.2), (1, 0.5), (2, 0.3)]);
    let problems = d1_problems(10);
    let s = settings(2, 1.0);
    let r = evaluate(&snap, &problems, &PatternId::TAGGED, &s, &v).unwrap();
    assert_eq!(r.pass1, evaluate_pass1(&snap, &problems, &s, &v).unwrap());
    assert_eq!(r.fixed.len(), 3);
    for f in &r.fixed {
        assert!(r.oracle >= f.pass1);
        let direct = evaluate_fixed_pattern(&snap, &problems, &Pattern::standard(f.pattern, &v), &s, &v).unwrap();
        assert_eq!(direct, f.pass1);
    }
    assert!(r.oracle >= r.pass1);
    assert_eq!(r.best_fixed(), r.fixed.iter().map(|f| f.pass1).fold(r.pass1, f64::max));
    let csv = eval_rows_csv(&r);
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    assert!(csv.lines().last().unwrap().starts_with("oracle,"));
    let total: f64 = r.usage.values().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r.usage["direct"], 1.0);
    assert_eq!(r.per_family.len(), 2);
}

#[test]
fn usage_of_random_policy_sums_to_one() {
    let cfg = tiny_config();
    let v = VocabSpec::default();
    let u = pattern_usage(&tiny_policy(&cfg), &d1_problems(5), &settings(3, 1.0), &v).unwrap();
    assert_eq!(u.len(), 4);
    assert!((u.values().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(u.contains_key(UNTAGGED));
}

#[test]
fn evaluation_rejects_empty_inputs() {
    let v = VocabSpec::default();
    let snap = scripted(&[(1, 1.0)]);
    assert!(evaluate_pass1(&snap, &[], &settings(2, 1.0), &v).is_err());
    assert!(evaluate_pass1(&snap, &d1_problems(1), &settings(0, 1.0), &v).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg).with_params(tiny_policy(&cfg).params, 17);
    let mut opt = AdamState::new(snap.num_params());
    opt.step = 9;
    opt.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
    opt.v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let digest = config_digest(&cfg).unwrap();
    save_checkpoint(&path, &snap, &opt, &digest).unwrap();
    let c = load_checkpoint(&path, Some(&digest)).unwrap();
    assert_eq!(c.snapshot, snap);
    assert_eq!(c.opt_state, opt);
    assert_eq!(c.config_digest, digest);
    assert!(matches!(load_checkpoint(&path, Some("other")), Err(crate::Error::Config(_))));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny_config();
    let snap = tiny_policy(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &snap, &AdamState::new(snap.num_params()), "d").unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let check = |b: &[u8]| {
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b).unwrap();
        matches!(load_checkpoint(&p, None), Err(crate::Error::Format(_)))
    };
    assert!(check(&bytes[..bytes.len() / 2]));
    assert!(check(&bytes[..10]));
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(check(&flipped));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(check(&magic));
}

#[test]
fn digest_tracks_config_changes() {
    let a = tiny_config();
    let mut b = a.clone();
    assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    b.train.steps += 1;
    assert_ne!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    assert_eq!(config_digest(&a).unwrap().len(), 64);
}

#[test]
fn jsonl_round_trip() {
    let cfg = tiny_config();
    let out = train(&cfg.train, &tiny_policy(&cfg), None, 2, &VocabSpec::default(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    write_jsonl(&path, &out.metrics).unwrap();
    let back: Vec<crate::objective::StepMetrics> = read_jsonl(&path).unwrap();
    assert_eq!(back, out.metrics);
    let sel_path = dir.path().join("s.jsonl");
    write_jsonl(&sel_path, &out.selections).unwrap();
    let sel: Vec<StepSelection> = read_jsonl(&sel_path).unwrap();
    assert_eq!(sel, out.selections);
}

#[test]
fn variant_configs() {
    let cfg = RunConfig::default();
    let n = cfg.train.patterns.len();
    let g = variant_config(&cfg, Variant::Gpso);
    assert_eq!(g, TrainConfig { algorithm: Algorithm::Gpso, ..cfg.train.clone() });
    let mpr = variant_config(&cfg, Variant::WithoutMultiPatternRollout);
    assert_eq!(mpr.algorithm, Algorithm::Grpo);
    assert_eq!(mpr.patterns, vec![PatternId::Adaptive]);
    assert_eq!(mpr.m, cfg.train.m * n);
    assert_eq!(variant_config(&cfg, Variant::WithoutOptimalPatternSelection).algorithm, Algorithm::AllPatterns);
    assert!(!variant_config(&cfg, Variant::WithoutMaskPatternTokens).mask_suffix);
    assert_eq!(variant_config(&cfg, Variant::GpsoWithKl).clip.kl_beta, cfg.ablation.kl_beta);
}

#[test]
fn ablation_matrix_has_one_row_per_variant_and_seed() {
    let mut cfg = tiny_config();
    cfg.ablation.seeds = vec![1, 2];
    cfg.train.steps = 1;
    let v = VocabSpec::default();
    let held = held_out_problems(&cfg.eval.families, 2, cfg.seed, &v).unwrap();
    let table = run_ablation_matrix_from(&cfg, &tiny_policy(&cfg), &held, &v).unwrap();
    assert_eq!(table.rows.len(), 10);
    for variant in Variant::ALL {
        assert!(table.mean(variant).is_some());
    }
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("algorithm,seed,eval_pass1"));
}

#[test]
fn baselines_cover_patterns_and_seeds() {
    let cfg = tiny_config();
    let v = VocabSpec::default();
    let held = held_out_problems(&cfg.eval.families, 2, cfg.seed, &v).unwrap();
    let rows = fixed_pattern_baselines(&cfg, &tiny_policy(&cfg), &held, &PatternId::ALL, &v).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.pass1)));
}

#[test]
fn warm_start_fits_and_experiment_runs() {
    let cfg = tiny_config();
    let v = VocabSpec::default();
    let (_, hist) = warm_start(&cfg, &v).unwrap();
    assert_eq!(hist.len(), cfg.warmstart.epochs);
    let r = run_experiment(&cfg, &v).unwrap();
    assert_eq!(r.output.metrics.len(), cfg.train.steps);
    assert_eq!(r.pre.problems, 2 * cfg.eval.problems_per_family);
}

#[test]
fn config_validation() {
    let v = VocabSpec::default();
    RunConfig::default().validate(&v).unwrap();
    tiny_config().validate(&v).unwrap();
    let bad = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = RunConfig::default();
        f(&mut c);
        matches!(c.validate(&v), Err(crate::Error::Config(_)))
    };
    assert!(bad(&|c| c.train.mini_batch_size = 5));
    assert!(bad(&|c| {
        c.train.algorithm = Algorithm::Grpo;
    }));
    assert!(bad(&|c| c.train.patterns = vec![PatternId::Direct, PatternId::Direct]));
    assert!(bad(&|c| c.train.temperature = 0.0));
    assert!(bad(&|c| c.arch.context_length = 16));
    assert!(bad(&|c| c.arch.vocab_size = 30));
    assert!(bad(&|c| c.train.families[0].difficulty = 9));
    assert!(bad(&|c| c.eval.k = 0));
    assert!(bad(&|c| c.ablation.kl_beta = 0.0));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let mut j = serde_json::to_value(RunConfig::default()).unwrap();
    j["train"]["stepz"] = serde_json::json!(3);
    assert!(serde_json::from_value::<RunConfig>(j).is_err());
    let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"steps": 7}}"#).unwrap();
    assert_eq!(partial.train.steps, 7);
    assert_eq!(partial.train.m, TrainConfig::default().m);
}
