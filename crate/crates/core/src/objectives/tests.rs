use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{HallucinationLevel, RecordMeta, RejectedResponse};
use crate::model::forward::{self, Trainable};
use crate::model::Model;
use crate::numcore::{finite_diff_check, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

fn pair(policy: f64, reference: f64) -> LogProbPair {
    LogProbPair { policy, reference }
}

fn example_batch() -> LossBatch {
    LossBatch {
        samples: vec![LossSample {
            chosen: pair(-1.0, -1.5),
            rejected: vec![pair(-2.0, -1.0)],
        }],
        beta: 0.5,
    }
}

/// r_w = 0.25 with rejected ratios -0.5 and -0.1 at beta 0.5.
fn three_way_batch() -> LossBatch {
    LossBatch {
        samples: vec![LossSample {
            chosen: pair(-1.0, -1.5),
            rejected: vec![pair(-2.0, -1.0), pair(-1.2, -1.0)],
        }],
        beta: 0.5,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, rejected: usize) -> LossBatch {
    random_batch_in(rng, rejected, 20.0)
}

fn random_batch_in(rng: &mut ChaCha8Rng, rejected: usize, depth: f64) -> LossBatch {
    let mut lp = || -rng.gen_range(0.01..depth);
    let samples = (0..4)
        .map(|_| LossSample {
            chosen: pair(lp(), lp()),
            rejected: (0..rejected).map(|_| pair(lp(), lp())).collect(),
        })
        .collect();
    LossBatch {
        samples,
        beta: rng.gen_range(0.05..2.0),
    }
}

fn zero_batch(rejected: usize) -> LossBatch {
    LossBatch {
        samples: vec![LossSample {
            chosen: pair(-3.0, -3.0),
            rejected: vec![pair(-2.0, -2.0); rejected],
        }],
        beta: 0.7,
    }
}

#[test]
fn dpo_example_value() {
    let out = dpo_loss(&example_batch()).unwrap();
    let oracle = (1.0 + (-0.75f64).exp()).ln();
    assert!((out.loss - oracle).abs() < 1e-12);
    assert!((out.loss - 0.3868).abs() < 1e-4);
    assert!((out.margins[0] - 0.75).abs() < 1e-12);
}

#[test]
fn dpo_rejects_other_arities() {
    assert!(matches!(
        dpo_loss(&three_way_batch()),
        Err(ObjectiveError::WrongArity { got: 2 })
    ));
}

#[test]
fn zero_ratios_give_log_k() {
    assert!((dpo_loss(&zero_batch(1)).unwrap().loss - LN2).abs() < 1e-12);
    for d in [DivisorMode::K, DivisorMode::KMinus1] {
        assert!((add_dpo_loss(&zero_batch(3), d).unwrap() - LN2).abs() < 1e-12);
    }
    assert!((pl_dpo_loss(&zero_batch(3)).unwrap() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn add_dpo_example_value() {
    let v = add_dpo_loss(&three_way_batch(), DivisorMode::KMinus1).unwrap();
    let oracle = (1.0 + (-0.55f64).exp()).ln();
    assert!((v - oracle).abs() < 1e-12);
    assert!((v - 0.4555).abs() < 5e-5);
    let k = add_dpo_loss(&three_way_batch(), DivisorMode::K).unwrap();
    let oracle_k = (1.0 + (-(0.25 + 0.6 / 3.0f64)).exp()).ln();
    assert!((k - oracle_k).abs() < 1e-12);
}

#[test]
fn pl_dpo_example_value() {
    let v = pl_dpo_loss(&three_way_batch()).unwrap();
    let oracle = (1.0 + (-0.75f64).exp() + (-0.35f64).exp()).ln();
    assert!((v - oracle).abs() < 1e-12);
    // The quoted four-digit figure is 1.2e-4 above the closed form.
    assert!((v - 0.7781).abs() < 2e-4);
}

#[test]
fn single_rejected_reductions_match_dpo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let b = random_batch(&mut rng, 1);
        let d = dpo_loss(&b).unwrap().loss;
        assert!((pl_dpo_loss(&b).unwrap() - d).abs() < 1e-10);
        assert!((add_dpo_loss(&b, DivisorMode::KMinus1).unwrap() - d).abs() < 1e-10);
    }
}

#[test]
fn large_margin_drives_loss_to_zero() {
    let b = LossBatch {
        samples: vec![LossSample {
            chosen: pair(-1.0, -200.0),
            rejected: vec![pair(-200.0, -1.0)],
        }],
        beta: 1.0,
    };
    assert!(dpo_loss(&b).unwrap().loss < 1e-100);
}

fn flatten(b: &LossBatch) -> Vec<f64> {
    b.samples
        .iter()
        .flat_map(|s| {
            std::iter::once(&s.chosen)
                .chain(&s.rejected)
                .flat_map(|p| [p.policy, p.reference])
        })
        .collect()
}

/// Re-records a batch from a flat leaf in [`flatten`] order.
fn record_flat(g: &mut Graph<f64>, x: Var, like: &LossBatch) -> Result<Vec<SampleVars>, NumError> {
    let mut i = 0;
    let mut next = |g: &mut Graph<f64>| {
        let v = g.index(x, i);
        i += 1;
        v
    };
    like.samples
        .iter()
        .map(|s| {
            let chosen_policy = next(g)?;
            let chosen_reference = next(g)?;
            let rejected = s
                .rejected
                .iter()
                .map(|_| Ok((next(g)?, next(g)?)))
                .collect::<Result<_, NumError>>()?;
            Ok(SampleVars {
                chosen_policy,
                chosen_reference,
                rejected,
            })
        })
        .collect()
}

fn unwrap_num(e: ObjectiveError) -> NumError {
    match e {
        ObjectiveError::Num(n) => n,
        other => panic!("{other}"),
    }
}

#[test]
fn policy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kinds = [
        PreferenceLoss::Dpo,
        PreferenceLoss::AddDpo(DivisorMode::K),
        PreferenceLoss::AddDpo(DivisorMode::KMinus1),
        PreferenceLoss::PlDpo,
    ];
    for kind in kinds {
        for trial in 0..20 {
            let rejected = if kind == PreferenceLoss::Dpo { 1 } else { 1 + trial % 3 };
            let b = random_batch_in(&mut rng, rejected, 5.0);
            let analytic = preference_loss_gradients(&b, kind).unwrap();
            let report = finite_diff_check(
                |g, x| {
                    let vars = record_flat(g, x, &b)?;
                    let loss = match kind {
                        PreferenceLoss::Dpo => dpo_graph(g, &vars, b.beta).map(|r| r.0),
                        PreferenceLoss::AddDpo(d) => add_dpo_graph(g, &vars, b.beta, d),
                        PreferenceLoss::PlDpo => pl_dpo_graph(g, &vars, b.beta),
                    };
                    loss.map_err(unwrap_num)
                },
                &flatten(&b),
                1e-5,
            )
            .unwrap();
            let flat_policy: Vec<f64> = report.analytic.iter().step_by(2).copied().collect();
            let numeric_policy: Vec<f64> = report.numeric.iter().step_by(2).copied().collect();
            for (a, n) in flat_policy.iter().zip(&numeric_policy) {
                let rel = (a - n).abs() / n.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4, "{kind:?}: {a} vs {n}");
            }
            let from_api: Vec<f64> = analytic.policy.concat();
            assert_eq!(from_api, flat_policy);
        }
    }
}

#[test]
fn reference_gradients_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [
        PreferenceLoss::Dpo,
        PreferenceLoss::AddDpo(DivisorMode::K),
        PreferenceLoss::AddDpo(DivisorMode::KMinus1),
        PreferenceLoss::PlDpo,
    ] {
        let rejected = if kind == PreferenceLoss::Dpo { 1 } else { 3 };
        let grads = preference_loss_gradients(&random_batch(&mut rng, rejected), kind).unwrap();
        assert!(grads.reference.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.policy.iter().flatten().any(|&g| g != 0.0));
    }
}

#[test]
fn invalid_batches_are_rejected() {
    let mut b = example_batch();
    b.beta = 0.0;
    assert!(matches!(dpo_loss(&b), Err(ObjectiveError::InvalidBeta(_))));
    let mut b = example_batch();
    b.samples[0].chosen.policy = 0.5;
    assert!(matches!(dpo_loss(&b), Err(ObjectiveError::InvalidLogProb(_))));
    let mut b = three_way_batch();
    b.samples[0].rejected.clear();
    assert!(matches!(
        pl_dpo_loss(&b),
        Err(ObjectiveError::EmptyRejected { sample: 0 })
    ));
    let b = LossBatch {
        samples: vec![],
        beta: 1.0,
    };
    assert!(matches!(
        add_dpo_loss(&b, DivisorMode::K),
        Err(ObjectiveError::EmptyBatch)
    ));
}

#[test]
fn objective_names_round_trip() {
    for o in Objective::ALL {
        assert_eq!(o.name().parse::<Objective>().unwrap(), o);
    }
    assert!("ppo".parse::<Objective>().is_err());
}

fn record(rejected: usize) -> PreferenceRecord {
    PreferenceRecord {
        id: "r".into(),
        prompt: "p".into(),
        chosen: "c".into(),
        rejected: (0..rejected)
            .map(|i| RejectedResponse {
                text: format!("bad {i}"),
                level: HallucinationLevel::ALL[i % 3],
            })
            .collect(),
        meta: RecordMeta {
            replacements: vec![],
            seed: 1,
        },
    }
}

#[test]
fn sep_dpo_expansion() {
    let out = sep_dpo_expand(&record(3));
    assert_eq!(out.len(), 3);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.chosen, "c");
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].text, format!("bad {i}"));
        assert_eq!(r.id, format!("r#{i}"));
    }
    assert_eq!(sep_dpo_expand(&record(1)), vec![record(1)]);
    let total: usize = [1, 3, 2].iter().map(|&k| sep_dpo_expand(&record(k)).len()).sum();
    assert_eq!(total, 6);
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        context: 16,
        seed: 5,
    }
}

fn sft_value(model: &Model<f64>, prompt: &[u32], chosen: &[u32]) -> f64 {
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, &model.params, None, Trainable::Nothing).unwrap();
    let l = sft_graph(&mut g, &model.config, &bound, prompt, chosen, None).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn sft_with_single_token_vocab_is_zero() {
    let model = Model::<f64>::init(tiny(1)).unwrap();
    assert_eq!(sft_value(&model, &[0, 0], &[0, 0, 0]), 0.0);
}

#[test]
fn sft_with_uniform_logits_is_log_vocab() {
    let mut model = Model::<f64>::init(tiny(7)).unwrap();
    model.params.unembed = Tensor::zeros(model.params.unembed.shape());
    let v = sft_value(&model, &[1, 2], &[3, 4, 5, 6]);
    assert!((v - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn sft_matches_per_token_oracle() {
    let model = Model::<f64>::init(tiny(9)).unwrap();
    let prompt = [1u32, 2, 3];
    let chosen = [4u32, 8, 0];
    let ids: Vec<u32> = prompt.iter().chain(&chosen).copied().collect();
    let logits = model.logits(&ids).unwrap();
    let mut nll = 0.0;
    for (j, &tok) in chosen.iter().enumerate() {
        let row = &logits.data()[(prompt.len() + j - 1) * 9..(prompt.len() + j) * 9];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        nll -= row[tok as usize] - lse;
    }
    let v = sft_value(&model, &prompt, &chosen);
    assert!((v - nll / 3.0).abs() < 1e-12, "{v} vs {}", nll / 3.0);
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let cfg = tiny(6);
    let model = Model::<f64>::init(cfg).unwrap();
    let flat: Vec<f64> = model
        .params
        .entries()
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();
    let report = finite_diff_check(
        |g, x| {
            let bound = forward::bind_flat(g, x, &cfg).map_err(|e| match e {
                ModelError::Num(n) => n,
                other => panic!("{other}"),
            })?;
            sft_graph(g, &cfg, &bound, &[1, 2], &[3, 4, 5], None).map_err(|e| match e {
                ObjectiveError::Num(n) | ObjectiveError::Model(ModelError::Num(n)) => n,
                other => panic!("{other}"),
            })
        },
        &flat,
        1e-5,
    )
    .unwrap();
    let worst = report
        .analytic
        .iter()
        .zip(&report.numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(a.abs()).max(1e-6))
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn sft_rejects_overflow_and_empty() {
    let model = Model::<f64>::init(tiny(5)).unwrap();
    let mut g = Graph::new();
    let bound = forward::bind(&mut g, &model.params, None, Trainable::Nothing).unwrap();
    let long = vec![1u32; 20];
    assert!(matches!(
        sft_graph(&mut g, &model.config, &bound, &[1], &long, None),
        Err(ObjectiveError::Model(ModelError::ContextOverflow { .. }))
    ));
    assert!(sft_graph(&mut g, &model.config, &bound, &[1], &[], None).is_err());
}

fn lp() -> impl Strategy<Value = f64> {
    -8.0..-0.01f64
}

fn sample_strategy(k: usize) -> impl Strategy<Value = LossSample> {
    (lp(), lp(), prop::collection::vec((lp(), lp()), k)).prop_map(|(cp, cr, rs)| LossSample {
        chosen: pair(cp, cr),
        rejected: rs.into_iter().map(|(p, r)| pair(p, r)).collect(),
    })
}

proptest! {
    #[test]
    fn losses_are_monotone(
        s in sample_strategy(3),
        beta in 0.05..2.0f64,
        delta in 0.01..1.0f64,
        j in 0usize..3,
    ) {
        let base = LossBatch { samples: vec![s.clone()], beta };
        let mut up_chosen = base.clone();
        up_chosen.samples[0].chosen.policy -= delta;
        let mut up_rejected = base.clone();
        up_rejected.samples[0].rejected[j].policy -= delta;
        let kinds = [PreferenceLoss::AddDpo(DivisorMode::K), PreferenceLoss::AddDpo(DivisorMode::KMinus1), PreferenceLoss::PlDpo];
        for kind in kinds {
            let l0 = preference_loss(&base, kind).unwrap();
            // Lower chosen log-prob raises the loss; lower rejected log-prob lowers it.
            prop_assert!(preference_loss(&up_chosen, kind).unwrap() > l0);
            prop_assert!(preference_loss(&up_rejected, kind).unwrap() < l0);
        }
        let mut pairwise = base.clone();
        pairwise.samples[0].rejected.truncate(1);
        let d0 = dpo_loss(&pairwise).unwrap().loss;
        let mut worse = pairwise.clone();
        worse.samples[0].chosen.policy -= delta;
        prop_assert!(dpo_loss(&worse).unwrap().loss > d0);
    }

    #[test]
    fn rejected_order_does_not_matter(s in sample_strategy(4), beta in 0.05..2.0f64, seed in 0u64..1000) {
        let base = LossBatch { samples: vec![s], beta };
        let mut shuffled = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut shuffled.samples[0].rejected[..], &mut rng);
        for kind in [PreferenceLoss::AddDpo(DivisorMode::K), PreferenceLoss::AddDpo(DivisorMode::KMinus1), PreferenceLoss::PlDpo] {
            prop_assert_eq!(
                preference_loss(&base, kind).unwrap().to_bits(),
                preference_loss(&shuffled, kind).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn doubling_beta_doubles_log_ratios(s in sample_strategy(3), beta in 0.05..2.0f64) {
        let one = LossBatch { samples: vec![s], beta };
        let two = LossBatch { beta: 2.0 * beta, ..one.clone() };
        for (a, b) in one.log_ratios().concat().iter().zip(two.log_ratios().concat()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn losses_are_non_negative(s in sample_strategy(2), beta in 0.05..2.0f64) {
        let b = LossBatch { samples: vec![s], beta };
        prop_assert!(pl_dpo_loss(&b).unwrap() >= 0.0);
        prop_assert!(add_dpo_loss(&b, DivisorMode::KMinus1).unwrap() >= 0.0);
    }
}
