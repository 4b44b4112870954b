//! Property tests for the invariants of the numeric building blocks.

use emi_core::align::{infonce_from_similarities, infonce_on_tape, infonce_weighted, EmbeddingBatch};
use emi_core::autograd::softmax_rows;
use emi_core::config::{Config, ModalitySet};
use emi_core::corpus::{corrupt, CorpusConfig, CorruptionKind, CorruptionSpec, Modality, NUM_EMOTIONS};
use emi_core::eval::{pearson, PearsonReport};
use emi_core::fusion::{encode_corpus, segment_pool, FusionConfig, FusionModel, SegmentPlan};
use emi_core::gradcheck::check_gradients;
use emi_core::params::{uniform_fan_in, ParamStore};
use emi_core::train::{ema_update, EmaState, ScheduleState};
use emi_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform_fan_in(&[n, d], 1, rng);
    for i in 0..n {
        let row = &mut t.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Plain log-sum-exp InfoNCE with unit weights, written out directly.
fn unweighted_infonce(sims: &Tensor, tau: f64) -> f64 {
    let n = sims.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / n as f64
}

fn two_pass_pearson(y: &[f64], yhat: &[f64]) -> f64 {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mh = yhat.iter().sum::<f64>() / n;
    let cov: f64 = y.iter().zip(yhat).map(|(a, b)| (a - my) * (b - mh)).sum();
    let vy: f64 = y.iter().map(|a| (a - my) * (a - my)).sum();
    let vh: f64 = yhat.iter().map(|b| (b - mh) * (b - mh)).sum();
    cov / (vy * vh).sqrt()
}

fn series(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = uniform_fan_in(&[len], 1, &mut rng).into_data();
    let noise = uniform_fan_in(&[len], 1, &mut rng).into_data();
    let yhat = y.iter().zip(&noise).map(|(a, e)| 0.7 * a + e).collect();
    (y, yhat)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_fan_in(&[rows, cols], 1, &mut rng).map(|v| 5.0 * v);
        let p = softmax_rows(&x);
        for r in 0..rows {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + c));
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_is_invariant_under_common_row_permutation(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = unit_rows(n, 4, &mut rng);
        let g = unit_rows(n, 4, &mut rng);
        let w: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = infonce_weighted(&EmbeddingBatch { f_mod: f.clone(), f_text: g.clone(), weights: w.clone(), temperature: 0.07 }).unwrap();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let permuted = infonce_weighted(&EmbeddingBatch {
            f_mod: permute_rows(&f, &perm),
            f_text: permute_rows(&g, &perm),
            weights: pw,
            temperature: 0.07,
        }).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn unit_weights_match_unweighted_loss(seed in any::<u64>(), n in 1usize..7, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sims = uniform_fan_in(&[n, n], 1, &mut rng);
        let weighted = infonce_from_similarities(&sims, &vec![1.0; n], tau).unwrap();
        let plain = unweighted_infonce(&sims, tau);
        prop_assert!((weighted - plain).abs() <= 1e-12 * plain.abs().max(1.0));
    }

    #[test]
    fn temperature_consistency(seed in any::<u64>(), n in 1usize..7, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sims = uniform_fan_in(&[n, n], 1, &mut rng);
        let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let base = infonce_from_similarities(&sims, &w, 0.07).unwrap();
        let scaled = infonce_from_similarities(&sims.map(|s| s * c), &w, 0.07 * c).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(seed in any::<u64>(), len in 3usize..200, a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let (y, yhat) = series(len, seed);
        let base = pearson(&y, &yhat).unwrap();
        let ay: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let ah: Vec<f64> = yhat.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&ay, &yhat).unwrap() - base).abs() < 1e-10);
        prop_assert!((pearson(&y, &ah).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn pearson_is_exactly_symmetric(seed in any::<u64>(), len in 3usize..200) {
        let (y, yhat) = series(len, seed);
        prop_assert_eq!(pearson(&y, &yhat).unwrap().to_bits(), pearson(&yhat, &y).unwrap().to_bits());
    }

    #[test]
    fn report_is_independent_of_sample_order(seed in any::<u64>(), n in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<[f64; NUM_EMOTIONS]> = (0..n).map(|_| std::array::from_fn(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))).collect();
        let preds: Vec<[f64; NUM_EMOTIONS]> = targets.iter().map(|t| std::array::from_fn(|k| 0.5 * t[k] + rand::Rng::gen_range(&mut rng, 0.0..0.5))).collect();
        let base = PearsonReport::from_predictions(&targets, &preds).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let st: Vec<_> = order.iter().map(|&i| targets[i]).collect();
        let sp: Vec<_> = order.iter().map(|&i| preds[i]).collect();
        let shuffled = PearsonReport::from_predictions(&st, &sp).unwrap();
        for (a, b) in base.rho_per_emotion.iter().zip(&shuffled.rho_per_emotion) {
            prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_matches_geometric_closed_form(gamma in 0.0f64..0.999, s0 in -5.0f64..5.0, theta in -5.0f64..5.0, steps in 0usize..300) {
        let mut shadow = ParamStore::new();
        shadow.insert("w", Tensor::full(&[3], s0));
        let mut live = ParamStore::new();
        live.insert("w", Tensor::full(&[3], theta));
        let mut ema = EmaState::new(gamma, &shadow);
        for _ in 0..steps {
            ema_update(&mut ema, &live).unwrap();
        }
        let g = gamma.powi(steps as i32);
        let expect = g * s0 + (1.0 - g) * theta;
        for v in ema.shadow().unwrap().get("w").unwrap().data() {
            prop_assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_is_periodic_and_bounded(eta_min in 1e-6f64..1e-2, span in 0.0f64..1.0, cycle in 1usize..20, t in 0usize..20, j in 0usize..5) {
        let s = ScheduleState::new(eta_min + span, eta_min, cycle).unwrap();
        let a = s.eta_at_epoch(t);
        prop_assert_eq!(a.to_bits(), s.eta_at_epoch(t + j * cycle).to_bits());
        prop_assert!(a >= eta_min && a <= eta_min + span);
        let mut walked = s.clone();
        for _ in 0..t + j * cycle {
            walked.advance();
        }
        prop_assert_eq!(walked.current_eta.to_bits(), a.to_bits());
        prop_assert!(walked.t_cur < cycle);
    }

    #[test]
    fn equal_segments_average_to_the_global_mean(seed in any::<u64>(), m in 1usize..6, per in 1usize..6, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = uniform_fan_in(&[m * per, c], 1, &mut rng);
        let (pooled, _) = segment_pool(&h, &SegmentPlan::new(m * per, m).unwrap()).unwrap();
        for j in 0..c {
            let global = (0..m * per).map(|t| h.get(&[t, j])).sum::<f64>() / (m * per) as f64;
            let of_means = (0..m).map(|s| pooled.get(&[s, j])).sum::<f64>() / m as f64;
            prop_assert!((global - of_means).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_and_corrupted_samples_keep_their_contracts(seed in any::<u64>(), frames in 4usize..12, strength in 0.0f64..1.0, kind in 0u8..3) {
        let corpus = CorpusConfig::new(seed, 3, frames, (5, 6, 4)).generate().unwrap();
        let kind = [CorruptionKind::GaussianNoise, CorruptionKind::OcclusionMask, CorruptionKind::DropoutFrames][kind as usize];
        for s in &corpus {
            prop_assert_eq!(s.visual.frames.shape()[0], s.audio.frames.shape()[0]);
            prop_assert_eq!(s.text.frames.shape()[0], 1);
            prop_assert!(s.target.iter().all(|v| (0.0..=1.0).contains(v)));
            let spec = CorruptionSpec { modality: Modality::Visual, kind, strength, frame_span: Some((1, frames - 1)) };
            let c = corrupt(s, &spec, seed).unwrap();
            prop_assert_eq!(c.target, s.target);
            prop_assert_eq!(&c.audio, &s.audio);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn infonce_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = unit_rows(n, 3, &mut rng);
        let g = unit_rows(n, 3, &mut rng);
        let w: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
        let report = check_gradients(&[f, g], |tape, v| {
            let fn_ = tape.l2_normalize(v[0])?;
            let gn = tape.l2_normalize(v[1])?;
            infonce_on_tape(tape, fn_, gn, &w, 0.5).map_err(|e| match e {
                emi_core::align::AlignError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn quality_weights_form_a_simplex_and_predictions_stay_in_range(seed in any::<u64>(), frames in 1usize..6, scale in 0.1f64..20.0) {
        let cfg = Config {
            frames,
            dim_visual: 3, dim_audio: 3, dim_text: 3, embed_dim: 3, encoder_hidden: 4,
            tcn_channels: 3, lstm_hidden: 2, d_shared: 4, segments: 1,
            transformer_layers: 1, heads: 1, ffn_hidden: 4, quality_hidden: 3,
            modalities: ModalitySet::ALL,
            ..Config::default()
        };
        let corpus = CorpusConfig::new(seed, 2, frames.max(4), (3, 3, 3)).generate().unwrap();
        let enc = emi_core::align::FrozenEncoders::random(&cfg, seed);
        let mut samples = encode_corpus(&enc, &corpus).unwrap();
        for s in &mut samples {
            s.visual = s.visual.map(|v| v * scale);
            s.audio = s.audio.map(|v| -v * scale);
        }
        let model = FusionModel::new(FusionConfig::from_config(&Config { frames: frames.max(4), ..cfg })).unwrap();
        let params = model.init(seed);
        for s in &samples {
            let q = model.quality(&params, s).unwrap().unwrap();
            let (bv, ba, bs) = (q.beta_v.unwrap(), q.beta_a.unwrap(), q.beta_s.unwrap());
            for t in 0..bv.len() {
                prop_assert!(bv[t] > 0.0 && ba[t] > 0.0 && bs[t] > 0.0);
                prop_assert!((bv[t] + ba[t] + bs[t] - 1.0).abs() < 1e-12);
            }
        }
        for p in model.predict(&params, &samples, 2).unwrap() {
            prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}

#[test]
fn pearson_agrees_with_two_pass_oracle_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let len = rand::Rng::gen_range(&mut rng, 3..=1000);
        let (y, yhat) = series(len, case);
        let got = pearson(&y, &yhat).unwrap();
        let want = two_pass_pearson(&y, &yhat);
        assert!((got - want).abs() < 1e-10, "case {case} len {len}: {got} vs {want}");
    }
}

#[test]
fn operations_are_deterministic() {
    let corpus = CorpusConfig::new(4, 3, 6, (4, 4, 4)).generate().unwrap();
    let cfg = Config {
        frames: 6,
        dim_visual: 4, dim_audio: 4, dim_text: 4, embed_dim: 4, encoder_hidden: 4,
        tcn_channels: 3, lstm_hidden: 2, d_shared: 4, segments: 2,
        transformer_layers: 1, heads: 1, ffn_hidden: 4, quality_hidden: 3,
        ..Config::default()
    };
    let enc = emi_core::align::FrozenEncoders::random(&cfg, 1);
    let samples = encode_corpus(&enc, &corpus).unwrap();
    let model = FusionModel::new(FusionConfig::from_config(&cfg)).unwrap();
    let params = model.init(3);
    let a = model.predict(&params, &samples, 3).unwrap();
    let b = model.predict(&params, &samples, 3).unwrap();
    let bits = |p: &Vec<[f64; 6]>| p.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.3, -0.1], vec![2.0, 0.5]]).unwrap());
    let y = tape.softmax(x).unwrap();
    let first = tape.value(y).clone();
    let y2 = tape.softmax(x).unwrap();
    assert_eq!(&first, tape.value(y2));
}
