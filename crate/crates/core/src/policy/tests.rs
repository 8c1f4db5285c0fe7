use super::*;
use rand::Rng;

pub(crate) fn tiny_arch(seed: u64) -> ArchConfig {
    ArchConfig {
        vocab_size: 7,
        context_length: 10,
        depth: 1,
        width: 4,
        head_count: 2,
        mlp_width: 8,
        seed,
        pad_token: Some(6),
        eos_token: Some(5),
        precision: Precision::F64,
    }
}

/// Random model with O(1) weights so gradients are far from the FD noise floor.
pub(crate) fn random_model(arch: &ArchConfig, seed: u64) -> PolicySnapshot {
    let base = init_params(arch, seed).unwrap();
    let mut rng = crate::seed::rng(seed ^ 0xABCD);
    let params = base
        .params
        .iter()
        .map(|p| p + 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    base.with_params(params, 0)
}

fn row(tokens: &[u32], mask: &[u8], prompt: usize) -> BatchRow {
    let loss_weight = (0..tokens.len())
        .map(|t| if t >= prompt && mask[t] == 1 { 1.0 } else { 0.0 })
        .collect();
    BatchRow { tokens: tokens.to_vec(), mask: mask.to_vec(), loss_weight }
}

fn sample_batch(arch: &ArchConfig) -> TokenBatch {
    let pad = arch.pad_token.unwrap();
    TokenBatch::from_rows(
        &[
            row(&[0, 1, 2, 3, 4, 1, 5], &[1, 1, 0, 0, 1, 1, 1], 4),
            row(&[2, 2, 3, 0, 5], &[1, 1, 1, 1, 1], 2),
            row(&[4, 3, 1, 0, 2, 2, 1, 5], &[1, 1, 1, 0, 1, 1, 1, 1], 4),
        ],
        pad,
    )
    .unwrap()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let arch = tiny_arch(0);
    let a = init_params(&arch, 3).unwrap();
    let b = init_params(&arch, 3).unwrap();
    assert_eq!(a.params, b.params);
    let c = init_params(&arch, 4).unwrap();
    let differ = a.params.iter().zip(&c.params).filter(|(x, y)| x != y).count();
    assert!(differ as f64 >= 0.99 * a.params.len() as f64);
    assert!(a.params.iter().all(|p| p.is_finite()));
}

#[test]
fn init_rejects_bad_arch() {
    let arch = ArchConfig { head_count: 3, ..tiny_arch(0) };
    assert!(matches!(init_params(&arch, 0), Err(crate::Error::Config(_))));
}

#[test]
fn logprobs_are_normalized() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 1);
    let batch = sample_batch(&arch);
    let lp = logprob(&snap, &batch).unwrap();
    assert!(lp.values.iter().all(|&v| v <= 0.0));
    // Substitute every non-PAD token at each position and sum probabilities.
    for i in 0..batch.rows() {
        for t in 1..batch.lengths[i] {
            let mut total = 0.0;
            for tok in 0..arch.vocab_size as u32 {
                if Some(tok) == arch.pad_token {
                    continue;
                }
                let mut b = batch.clone();
                b.tokens[i * b.width + t] = tok;
                total += logprob(&snap, &b).unwrap().at(i, t).exp();
            }
            assert!((total - 1.0).abs() < 1e-12, "row {i} pos {t}: {total}");
        }
    }
}

#[test]
fn masked_token_content_is_invisible() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 2);
    let batch = sample_batch(&arch);
    let before = logprob(&snap, &batch).unwrap();
    for tok in 0..5u32 {
        let mut b = batch.clone();
        b.tokens[2] = tok;
        b.tokens[3] = (tok + 1) % 5;
        let after = logprob(&snap, &b).unwrap();
        for t in 0..b.width {
            if t == 2 || t == 3 {
                continue;
            }
            assert_eq!(before.at(0, t).to_bits(), after.at(0, t).to_bits());
        }
        assert_eq!(before.row(1), after.row(1));
    }
}

#[test]
fn logprob_rerun_is_bit_identical() {
    let arch = ArchConfig {
        vocab_size: 8,
        context_length: 8,
        width: 8,
        head_count: 2,
        mlp_width: 16,
        pad_token: None,
        eos_token: None,
        ..tiny_arch(0)
    };
    let snap = init_params(&arch, 11).unwrap();
    let batch = TokenBatch::from_rows(&[row(&[1, 4, 2, 7, 0, 3], &[1; 6], 1)], u32::MAX).unwrap();
    let a = logprob(&snap, &batch).unwrap();
    let b = logprob(&snap, &batch).unwrap();
    assert_eq!(
        a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn rejects_out_of_vocab_tokens() {
    let arch = tiny_arch(0);
    let snap = init_params(&arch, 0).unwrap();
    let mut batch = sample_batch(&arch);
    batch.tokens[1] = 99;
    assert!(matches!(logprob(&snap, &batch), Err(crate::Error::Input(_))));
}

#[test]
fn greedy_ignores_seed_and_sampling_is_seeded() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 3);
    let g1 = sample(&snap, &[0, 1], 0.0, 6, 1).unwrap();
    let g2 = sample(&snap, &[0, 1], 0.0, 6, 999).unwrap();
    assert_eq!(g1, g2);
    let s1 = sample(&snap, &[0, 1], 0.6, 6, 5).unwrap();
    let s2 = sample(&snap, &[0, 1], 0.6, 6, 5).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.tokens.iter().all(|&t| Some(t) != arch.pad_token));
}

#[test]
fn vanishing_temperature_matches_greedy() {
    let arch = tiny_arch(0);
    for seed in 0..5 {
        let snap = random_model(&arch, seed);
        let g = sample(&snap, &[2, 3], 0.0, 7, 0).unwrap();
        let c = sample(&snap, &[2, 3], 1e-9, 7, seed).unwrap();
        assert_eq!(g.tokens, c.tokens);
    }
}

#[test]
fn sampled_logprobs_match_full_forward() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 4);
    let prefix = [1u32, 0, 3];
    let s = sample(&snap, &prefix, 1.0, 6, 42).unwrap();
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(&s.tokens);
    let batch = TokenBatch::from_rows(&[row(&tokens, &vec![1; tokens.len()], 3)], 6).unwrap();
    let lp = logprob(&snap, &batch).unwrap();
    for (k, &l) in s.logprobs.iter().enumerate() {
        assert_eq!(l.to_bits(), lp.at(0, 3 + k).to_bits());
    }
}

#[test]
fn sampling_frequencies_match_tempered_softmax() {
    // Two-token vocabulary; all weights zero so logits equal the output bias.
    let arch = ArchConfig {
        vocab_size: 2,
        context_length: 4,
        depth: 1,
        width: 2,
        head_count: 1,
        mlp_width: 2,
        seed: 0,
        pad_token: None,
        eos_token: None,
        precision: Precision::F64,
    };
    let layout = Layout::new(&arch);
    let mut params = vec![0.0; layout.total];
    params[layout.b_out] = 0.3;
    params[layout.b_out + 1] = -0.5;
    let snap = PolicySnapshot::from_params(arch, params, 0).unwrap();
    let temperature = 0.6;
    let z: [f64; 2] = [0.3 / temperature, -0.5 / temperature];
    let p0 = z[0].exp() / (z[0].exp() + z[1].exp());
    let draws = 10_000;
    let zeros = (0..draws)
        .filter(|&s| sample(&snap, &[0], temperature, 1, s).unwrap().tokens[0] == 0)
        .count();
    let freq = zeros as f64 / draws as f64;
    assert!((freq - p0).abs() < 0.02, "{freq} vs {p0}");
}

#[test]
fn prefix_overflow_is_input_error() {
    let arch = tiny_arch(0);
    let snap = init_params(&arch, 0).unwrap();
    let long = vec![1u32; arch.context_length];
    assert!(matches!(sample(&snap, &long, 1.0, 2, 0), Err(crate::Error::Input(_))));
}

#[test]
fn zero_scalars_give_zero_gradient() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 5);
    let batch = sample_batch(&arch);
    let g = backward(&snap, &batch, &vec![0.0; batch.tokens.len()]).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn scalar_on_unweighted_position_rejected() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 5);
    let batch = sample_batch(&arch);
    let mut s = vec![0.0; batch.tokens.len()];
    s[2] = 1.0; // masked suffix position
    assert!(matches!(backward(&snap, &batch, &s), Err(crate::Error::Input(_))));
    let mut s = vec![0.0; batch.tokens.len()];
    s[batch.width + 4] = f64::NAN;
    assert!(backward(&snap, &batch, &s).is_err());
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..3 {
        let arch = tiny_arch(seed);
        let snap = random_model(&arch, 10 + seed);
        assert!(snap.num_params() <= 500, "{}", snap.num_params());
        let batch = sample_batch(&arch);
        let coords: Vec<usize> = (0..snap.num_params()).collect();
        let err = finite_diff_check(&snap, &batch, &coords).unwrap();
        assert!(err < 1e-4, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn two_block_gradient_matches_finite_differences() {
    let arch = ArchConfig { depth: 2, ..tiny_arch(0) };
    let snap = random_model(&arch, 21);
    let batch = sample_batch(&arch);
    let mut rng = crate::seed::rng(3);
    let coords: Vec<usize> = (0..200).map(|_| rng.gen_range(0..snap.num_params())).collect();
    let err = finite_diff_check(&snap, &batch, &coords).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn tempered_gradient_matches_finite_differences() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 8);
    let batch = sample_batch(&arch);
    let s: Vec<f64> = batch.loss_weight.iter().enumerate().map(|(i, w)| w * (1.0 + i as f64 * 0.1)).collect();
    let (_, g) = backward_at(&snap, &batch, &s, 0.6).unwrap();
    let f = |theta: &[f64]| {
        let sn = snap.with_params(theta.to_vec(), 0);
        let lp = logprob_at(&sn, &batch, 0.6).unwrap();
        lp.values.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
    };
    let coords: Vec<usize> = (0..snap.num_params()).collect();
    let err = max_relative_error(f, &snap.params, &g, &coords, GradCheckOptions::for_precision(Precision::F64));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sabotaged_gradient_is_detected() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 6);
    let batch = sample_batch(&arch);
    let scalars: Vec<f64> = batch.loss_weight.clone();
    let mut g = backward(&snap, &batch, &scalars).unwrap();
    let target = snap.layout().b_out + 1;
    assert!(g[target].abs() > 1e-3);
    g[target] = 0.0;
    let err = finite_diff_check_grad(&snap, &batch, &scalars, &g, &[target]).unwrap();
    assert!((err - 1.0).abs() < 1e-6, "{err}");
}

#[test]
fn all_zero_weights_check_is_zero() {
    let arch = tiny_arch(0);
    let snap = random_model(&arch, 6);
    let mut batch = sample_batch(&arch);
    batch.loss_weight.iter_mut().for_each(|w| *w = 0.0);
    let coords: Vec<usize> = (0..snap.num_params()).step_by(7).collect();
    assert_eq!(finite_diff_check(&snap, &batch, &coords).unwrap(), 0.0);
}

#[test]
fn fp32_gradient_within_relaxed_tolerance() {
    let arch = ArchConfig { precision: Precision::F32, ..tiny_arch(0) };
    let snap = random_model(&arch, 7);
    let batch = sample_batch(&arch);
    let lp = logprob(&snap, &batch).unwrap();
    assert!(lp.values.iter().all(|v| v.is_finite()));
    // Coordinates with sizeable gradients; tiny ones are dominated by f32 rounding.
    let g = backward(&snap, &batch, &batch.loss_weight).unwrap();
    let coords: Vec<usize> = (0..snap.num_params()).filter(|&i| g[i].abs() > 1e-2).collect();
    assert!(!coords.is_empty());
    let mut reference = snap.clone();
    reference.arch.precision = Precision::F64;
    let err = finite_diff_check_grad(&reference, &batch, &batch.loss_weight, &g, &coords).unwrap();
    assert!(err < 1e-2, "{err}");
}

fn fit_corpus(n: usize) -> Vec<FitExample> {
    (0..n)
        .map(|i| FitExample {
            input: vec![(i % 5) as u32, ((i + 1) % 5) as u32],
            target: vec![((i * 3) % 5) as u32, 5],
        })
        .collect()
}

#[test]
fn fit_decreases_nll_monotonically() {
    let arch = ArchConfig { width: 8, mlp_width: 16, ..tiny_arch(0) };
    let snap = init_params(&arch, 1).unwrap();
    let corpus = fit_corpus(10);
    let opts = FitOptions {
        batch_size: corpus.len(),
        seed: 0,
        optimizer: AdamWConfig { lr: 3e-3, ..Default::default() },
    };
    let (fitted, hist) = warmstart_fit_with(&snap, &corpus, 200, &opts).unwrap();
    assert!(hist.windows(2).all(|w| w[1] < w[0]), "non-monotone: {hist:?}");
    assert!(mean_nll(&fitted, &corpus).unwrap() < mean_nll(&snap, &corpus).unwrap());
}

#[test]
fn zero_epochs_is_identity() {
    let arch = tiny_arch(0);
    let snap = init_params(&arch, 1).unwrap();
    let out = warmstart_fit(&snap, &fit_corpus(3), 0, 1e-2).unwrap();
    assert_eq!(out.params, snap.params);
    assert!(matches!(warmstart_fit(&snap, &[], 5, 1e-2), Err(crate::Error::Input(_))));
}

#[test]
fn single_example_is_memorized() {
    let arch = ArchConfig { width: 8, mlp_width: 16, ..tiny_arch(0) };
    let snap = init_params(&arch, 2).unwrap();
    let corpus = vec![FitExample { input: vec![1, 2, 3], target: vec![4, 0, 5] }; 4];
    let fitted = warmstart_fit(&snap, &corpus, 300, 2e-2).unwrap();
    let nll = mean_nll(&fitted, &corpus).unwrap();
    assert!(nll < 0.05, "{nll}");
}

#[test]
fn scripted_policy_emits_its_script() {
    let arch = ArchConfig { vocab_size: 7, context_length: 8, width: 8, ..tiny_arch(0) };
    let script = vec![vec![(2, 1.0)], vec![(0, 0.25), (1, 0.75)], vec![(5, 1.0)]];
    let snap = scripted_policy(&arch, 2, &script).unwrap();
    let tokens = vec![3, 4, 3, 2, 1, 5];
    let b = TokenBatch::from_rows(&[BatchRow { tokens: tokens.clone(), mask: vec![1; 6], loss_weight: vec![0.0; 6] }], 6)
        .unwrap();
    let lp = logprob(&snap, &b).unwrap();
    assert!(lp.at(0, 3).abs() < 1e-12);
    assert!((lp.at(0, 4) - 0.75f64.ln()).abs() < 1e-9);
    assert!(lp.at(0, 5).abs() < 1e-12);
    let other = TokenBatch::from_rows(&[BatchRow { tokens: vec![3, 4, 3, 2, 0, 5], mask: vec![1; 6], loss_weight: vec![0.0; 6] }], 6)
        .unwrap();
    assert!((logprob(&snap, &other).unwrap().at(0, 4) - 0.25f64.ln()).abs() < 1e-9);
}

#[test]
fn scripted_policy_rejects_bad_scripts() {
    let arch = ArchConfig { vocab_size: 7, context_length: 8, width: 8, ..tiny_arch(0) };
    assert!(scripted_policy(&arch, 0, &[vec![(0, 0.5)]]).is_err());
    assert!(scripted_policy(&arch, 0, &[vec![(9, 1.0)]]).is_err());
    assert!(scripted_policy(&arch, 7, &[vec![(0, 1.0)], vec![(0, 1.0)]]).is_err());
    assert!(scripted_policy(&tiny_arch(0), 0, &[vec![(0, 1.0)]]).is_err());
}
