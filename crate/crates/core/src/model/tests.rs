use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::NORM_EPS;
use crate::embeddings::{EmbeddingTable, Vocab, EOS};

fn table(words: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = (0..words).map(|i| format!("w{i}")).collect();
    let rows = (0..words)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    EmbeddingTable::from_rows(names, rows, true).unwrap()
}

fn tiny_config(objective: Objective) -> ModelConfig {
    ModelConfig {
        objective,
        input_dim: 3,
        enc_hidden: 3,
        dec_hidden: 4,
        attn_dim: 3,
        token_dim: 3,
        embed_dim: 4,
        init_scale: 0.3,
        max_src_len: 8,
        max_tgt_len: 10,
        ..ModelConfig::default()
    }
}

fn tiny_model(objective: Objective, seed: u64) -> Model {
    let tgt = Vocab::new(["a", "b", "c", "d", "e"]).unwrap();
    Model::new(tiny_config(objective), table(6, 4, 9), tgt, seed).unwrap()
}

fn frames(t: usize, f: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![t, f], data).unwrap()
}

fn assert_rows_sum_to_one(t: &Tensor) {
    for r in 0..t.rows() {
        let s: f64 = t.row_slice(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
    }
}

#[test]
fn encoder_downsamples_by_eight() {
    let m = tiny_model(Objective::Cs, 1);
    for (t, want) in [(16, 2), (8, 1), (20, 3)] {
        let e = m.encode(&frames(t, 3, t as u64)).unwrap();
        assert_eq!(e.states.shape(), &[want, 6]);
        assert_eq!(e.valid_len, want);
    }
    for t in 1..=64 {
        assert_eq!(m.encode(&frames(t, 3, 0)).unwrap().valid_len, t.div_ceil(8));
    }
}

#[test]
fn encoder_rejects_bad_input() {
    let m = tiny_model(Objective::Me, 1);
    assert!(matches!(m.encode(&Tensor::zeros(&[0, 3])), Err(ModelError::InvalidArgument(_))));
    assert!(matches!(
        m.encode(&frames(4, 5, 0)),
        Err(ModelError::InputWidth { expected: 3, got: 5 })
    ));
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.temperature = 0.0;
    assert!(c.validate().is_err());
    c = ModelConfig { scheduled_sampling_p: 1.5, ..ModelConfig::default() };
    assert!(c.validate().is_err());
    c = ModelConfig { dec_hidden: 0, ..ModelConfig::default() };
    assert!(c.validate().is_err());
    c = ModelConfig { downsample_per_layer: 3, ..ModelConfig::default() };
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&ModelConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::default());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    assert_eq!(Objective::parse("CS"), Some(Objective::Cs));
    assert_eq!(Objective::parse("xx"), None);
}

#[test]
fn teacher_forced_source_has_one_state_per_token() {
    for obj in [Objective::Me, Objective::Cd, Objective::Cs] {
        let m = tiny_model(obj, 2);
        let enc = m.encode(&frames(13, 3, 4)).unwrap();
        let out = m.decode_source(&enc, Some(&[4, 7, 5, EOS])).unwrap();
        assert_eq!(out.states.rows(), 4);
        assert_eq!(out.tokens, vec![4, 7, 5, EOS]);
        assert_eq!(out.distributions.shape(), &[4, m.candidates().len()]);
        assert_rows_sum_to_one(&out.distributions);
        assert_eq!(out.projected.is_some(), obj != Objective::Me);
        assert!(!out.truncated);
    }
    let se = tiny_model(Objective::Se, 2);
    let enc = se.encode(&frames(8, 3, 4)).unwrap();
    assert!(matches!(se.decode_source(&enc, None), Err(ModelError::Unsupported(_))));
}

#[test]
fn free_running_source_stops_at_eos_or_flags_truncation() {
    let m = tiny_model(Objective::Cs, 3);
    let enc = m.encode(&frames(10, 3, 1)).unwrap();
    let out = m.decode_source(&enc, None).unwrap();
    let ended = out.tokens.last() == Some(&EOS);
    assert_eq!(out.truncated, !ended);
    if out.truncated {
        assert_eq!(out.tokens.len(), m.config.max_src_len);
    }
}

#[test]
fn cs_distribution_ignores_state_scale_without_bias() {
    let m = tiny_model(Objective::Cs, 4);
    let enc = m.encode(&frames(9, 3, 2)).unwrap();
    let out = m.decode_source(&enc, Some(&[5, 6])).unwrap();
    for r in 0..2 {
        let s = out.states.row_slice(r);
        let d = m.cs_distribution(s, m.config.temperature).unwrap();
        // The graph keeps ε in the query norm, which acts as a temperature
        // factor of 1 − ε/(2|q|²); cs_distribution has no such factor.
        let q = out.projected.as_ref().unwrap().row_slice(r);
        let bound = NORM_EPS / (q.iter().map(|x| x * x).sum::<f64>() * m.config.temperature) + 1e-14;
        for (a, b) in d.iter().zip(out.distributions.row_slice(r)) {
            assert!((a - b).abs() < bound, "{a} vs {b}, bound {bound:e}");
        }
        let scaled: Vec<f64> = s.iter().map(|x| x * 10.0).collect();
        let d10 = m.cs_distribution(&scaled, m.config.temperature).unwrap();
        for (a, b) in d.iter().zip(&d10) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn recognize_matches_nearest_neighbour_and_ignores_temperature() {
    let mut m = tiny_model(Objective::Cs, 5);
    let enc = m.encode(&frames(12, 3, 3)).unwrap();
    let teacher = [4, 5, 6, 7, 8, 9];
    let base = m.decode_source(&enc, Some(&teacher)).unwrap();
    let proj = base.projected.clone().unwrap();
    for r in 0..proj.rows() {
        let argmax = m.candidates()[crate::vecmath::argmax(base.distributions.row_slice(r))];
        if argmax != EOS {
            let nn = m.embeddings().nearest_neighbors(proj.row_slice(r), 1).unwrap();
            assert_eq!(nn[0].0, argmax);
        }
    }
    let mut outputs = Vec::new();
    for tau in [0.01, 0.1, 1.0] {
        m.config.temperature = tau;
        let out = m.decode_source(&enc, Some(&teacher)).unwrap();
        assert_rows_sum_to_one(&out.distributions);
        let argmaxes: Vec<usize> = (0..out.distributions.rows())
            .map(|r| crate::vecmath::argmax(out.distributions.row_slice(r)))
            .collect();
        outputs.push((m.recognize(&out).unwrap(), argmaxes));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn recognize_breaks_ties_towards_lowest_id() {
    let m = tiny_model(Objective::Me, 6);
    let c = m.candidates().len();
    let uniform = SourceDecoderOutput {
        tokens: vec![],
        states: Tensor::zeros(&[1, 4]),
        projected: None,
        distributions: Tensor::full(&[1, c], 1.0 / c as f64),
        truncated: false,
    };
    // the lowest candidate is EOS, so nothing is emitted
    assert_eq!(m.candidates()[0], EOS);
    assert!(m.recognize(&uniform).unwrap().is_empty());
    let mut d = vec![0.1; c];
    d[3] = 0.5;
    d[5] = 0.5;
    let two = SourceDecoderOutput { distributions: Tensor::row(&d), ..uniform };
    assert_eq!(m.recognize(&two).unwrap(), vec![m.candidates()[3]]);
}

#[test]
fn target_decoder_step_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for obj in Objective::ALL {
        let m = tiny_model(obj, 7);
        let enc = m.encode(&frames(11, 3, 5)).unwrap();
        let src = match obj {
            Objective::Se => None,
            _ => Some(m.decode_source(&enc, Some(&[4, 5, EOS])).unwrap()),
        };
        let teacher = [4, 6, 5, 8, EOS];
        let out = m.decode_target(&enc, src.as_ref(), Some(&teacher), 1.0, &mut rng).unwrap();
        assert_eq!(out.distributions.rows(), 5);
        assert_eq!(out.tokens, teacher);
        assert_rows_sum_to_one(&out.distributions);
        let again = m.decode_target(&enc, src.as_ref(), Some(&teacher), 1.0, &mut rng).unwrap();
        assert_eq!(out, again);
        let free = m.decode_target(&enc, src.as_ref(), Some(&teacher), 0.0, &mut rng).unwrap();
        assert_eq!(free.distributions.rows(), 5);
        assert_eq!(free.distributions.row_slice(0), out.distributions.row_slice(0));
    }
}

#[test]
fn free_running_target_against_teacher_follows_own_predictions() {
    let m = tiny_model(Objective::Me, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = m.encode(&frames(11, 3, 5)).unwrap();
    let src = m.decode_source(&enc, Some(&[4, EOS])).unwrap();
    let greedy = m.decode_target(&enc, Some(&src), None, 1.0, &mut rng).unwrap();
    let q = greedy.tokens.len();
    let teacher = vec![4; q];
    let free = m.decode_target(&enc, Some(&src), Some(&teacher), 0.0, &mut rng).unwrap();
    for r in 0..q {
        for (a, b) in free.distributions.row_slice(r).iter().zip(greedy.distributions.row_slice(r)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn target_decoder_needs_source_states() {
    let m = tiny_model(Objective::Cd, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = m.encode(&frames(8, 3, 5)).unwrap();
    assert!(m.decode_target(&enc, None, None, 1.0, &mut rng).is_err());
    let empty = SourceDecoderOutput {
        tokens: vec![],
        states: Tensor::zeros(&[0, 4]),
        projected: Some(Tensor::zeros(&[0, 4])),
        distributions: Tensor::zeros(&[0, 7]),
        truncated: false,
    };
    assert!(m.decode_target(&enc, Some(&empty), None, 1.0, &mut rng).is_err());
}

#[test]
fn beam_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for obj in Objective::ALL {
        for seed in 0..3 {
            let m = tiny_model(obj, 20 + seed);
            let x = frames(14, 3, seed);
            let hyp = m.translate(&x, 1, 10).unwrap();
            let enc = m.encode(&x).unwrap();
            let src = match obj {
                Objective::Se => None,
                _ => Some(m.decode_source(&enc, None).unwrap()),
            };
            let greedy = m.decode_target(&enc, src.as_ref(), None, 1.0, &mut rng).unwrap();
            let mut toks = greedy.tokens.clone();
            if toks.last() == Some(&EOS) {
                toks.pop();
                assert!(hyp.finished);
            }
            assert_eq!(hyp.tokens, toks, "{obj} seed {seed}");
        }
    }
}

#[test]
fn wider_beam_never_scores_worse_on_seeded_models() {
    for seed in 0..6 {
        let m = tiny_model(Objective::Cs, 40 + seed);
        let x = frames(15, 3, seed);
        let one = m.translate(&x, 1, 10).unwrap();
        let four = m.translate(&x, 4, 10).unwrap();
        if one.finished {
            assert!(four.score >= one.score - 1e-12, "seed {seed}: {} < {}", four.score, one.score);
        }
    }
}

#[test]
fn peaked_output_gives_one_hypothesis_for_every_beam() {
    let mut m = tiny_model(Objective::Me, 11);
    let b = m.params.get_mut("tgt.out.b").unwrap();
    b.data_mut()[EOS] = 200.0;
    let x = frames(9, 3, 1);
    let hyps: Vec<Hypothesis> = [1, 2, 4].iter().map(|&k| m.translate(&x, k, 6).unwrap()).collect();
    for h in &hyps {
        assert!(h.tokens.is_empty() && h.finished);
        assert_eq!(h, &hyps[0]);
    }
    assert!(matches!(m.translate(&x, 0, 6), Err(ModelError::InvalidArgument(_))));
}

#[test]
fn batch_loss_is_mean_of_single_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for obj in Objective::ALL {
        let m = tiny_model(obj, 12);
        let a = Example { frames: frames(9, 3, 1), source: vec![4, 5], target: vec![5, 6, 7] };
        let b = Example { frames: frames(21, 3, 2), source: vec![6, 7, 8, 9], target: vec![4] };
        let la = m.loss_graph(&[&a], 1.0, &mut rng).unwrap().stats;
        let lb = m.loss_graph(&[&b], 1.0, &mut rng).unwrap().stats;
        let lab = m.loss_graph(&[&a, &b], 1.0, &mut rng).unwrap().stats;
        assert_abs_diff_eq!(lab.total, (la.total + lb.total) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lab.target_nll, la.target_nll + lb.target_nll, epsilon = 1e-12);
        assert_eq!(lab.target_tokens, 4 + 2);
        assert!(lab.total >= 0.0);
        if obj == Objective::Cd {
            let s = lab.source.unwrap();
            assert!((0.0..=2.0).contains(&s));
            assert_eq!(lab.source_tokens, 3 + 5);
        }
    }
}

#[test]
fn teacher_forced_loss_matches_decoder_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = tiny_model(Objective::Me, 13);
    let ex = Example { frames: frames(10, 3, 3), source: vec![4, 6], target: vec![7, 5] };
    let stats = m.loss_graph(&[&ex], 1.0, &mut rng).unwrap().stats;
    let enc = m.encode(&ex.frames).unwrap();
    let src = m.decode_source(&enc, Some(&[4, 6, EOS])).unwrap();
    let tgt = m.decode_target(&enc, Some(&src), Some(&[7, 5, EOS]), 1.0, &mut rng).unwrap();
    let src_p: Vec<f64> = [4, 6, EOS]
        .iter()
        .enumerate()
        .map(|(i, &id)| src.distributions.get(i, m.candidate_index(id).unwrap()))
        .collect();
    let tgt_p: Vec<f64> = [7, 5, EOS].iter().enumerate().map(|(i, &id)| tgt.distributions.get(i, id)).collect();
    let want = multitask_loss(&src_p, &tgt_p, 1.0, 1.0).unwrap();
    assert_abs_diff_eq!(stats.total, want, epsilon = 1e-10);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = tiny_model(Objective::Cs, 14);
    let back = ParamStore::from_json(&m.params.to_json()).unwrap();
    let m2 = Model::with_params(m.config.clone(), m.embeddings().clone(), m.target_vocab().clone(), back).unwrap();
    assert_eq!(m.params, m2.params);
    let other = tiny_model(Objective::Me, 14);
    assert!(Model::with_params(m.config.clone(), m.embeddings().clone(), m.target_vocab().clone(), other.params).is_err());
}

#[test]
fn loss_rejects_unknown_ids() {
    let m = tiny_model(Objective::Cs, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = Example { frames: frames(8, 3, 0), source: vec![99], target: vec![4] };
    assert!(m.loss_graph(&[&bad], 1.0, &mut rng).is_err());
    let bad = Example { frames: frames(8, 3, 0), source: vec![4], target: vec![1] };
    assert!(m.loss_graph(&[&bad], 1.0, &mut rng).is_err());
    assert!(m.loss_graph(&[], 1.0, &mut rng).is_err());
}
