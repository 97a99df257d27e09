use std::f64::consts::LN_2;

use proptest::prelude::*;

use super::*;
use crate::corpus::Corpus;
use crate::model::Encoder;
use crate::sampler::build_dataset;
use crate::synth::{generate_corpus, SynthConfig};

fn out(p_y: [f64; 2], p_yo: Option<[f64; 2]>, p_yc: [f64; 2]) -> ForwardOutput {
    ForwardOutput {
        p_y,
        p_yo,
        p_yc,
        mask_probs: None,
        lambda: p_yo.map(|p| p[1]),
    }
}

fn target(y: bool, y_o: bool, mask: &[bool]) -> Targets {
    Targets {
        y,
        y_o,
        mask: mask.to_vec(),
    }
}

#[test]
fn loss_p_examples() {
    let t = [target(true, false, &[])];
    let only_y = LossTerms::Y;
    assert!((loss_p(&[out([0.5, 0.5], None, [0.5, 0.5])], &t, only_y).unwrap() - LN_2).abs() < 1e-12);
    assert_eq!(
        loss_p(&[out([0.0, 1.0], Some([1.0, 0.0]), [0.0, 1.0])], &t, LossTerms::ALL).unwrap(),
        0.0
    );
    let o = [out([0.5, 0.5], Some([0.9, 0.1]), [0.2, 0.8])];
    let base = loss_p(&o, &t, LossTerms::default()).unwrap();
    let all = loss_p(&o, &t, LossTerms::ALL).unwrap();
    assert!((all - base - -(0.8f64).ln()).abs() < 1e-12);
    assert!(loss_p(&[out([0.5, 0.5], None, [0.5, 0.5])], &t, LossTerms::default()).is_err());
}

#[test]
fn loss_p_clamps_the_log() {
    let v = loss_p(
        &[out([1.0, 0.0], None, [1.0, 0.0])],
        &[target(true, false, &[])],
        LossTerms::Y,
    )
    .unwrap();
    assert!((v - -(1e-12f64).ln()).abs() < 1e-9);
}

#[test]
fn loss_m_examples() {
    assert_eq!(loss_m(&[vec![0.3, 0.9]], &[vec![false, false]]).unwrap(), 0.0);
    assert_eq!(loss_m(&[vec![1.0, 0.0]], &[vec![true, false]]).unwrap(), 0.0);
    let v = loss_m(&[vec![0.5, 0.5]], &[vec![true, false]]).unwrap();
    assert!((v - LN_2).abs() < 1e-12);
    assert!(loss_m(&[vec![0.5]], &[vec![true, false]]).is_err());
}

#[test]
fn total_loss_examples() {
    let zero = TrainConfig {
        eta: 0.0,
        tau: 0.0,
        gamma: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(total_loss(3.0, 2.0, 7.0, &zero), 0.0);
    let c = TrainConfig {
        gamma: 0.0,
        ..TrainConfig::default()
    };
    assert!((total_loss(1.0, 0.1, 0.0, &c) - 1.1).abs() < 1e-12);
    let g = TrainConfig {
        eta: 0.0,
        tau: 0.0,
        ..TrainConfig::default()
    };
    assert!((total_loss(0.0, 0.0, 2.0 * 2.0, &g) - 4e-5).abs() < 1e-18);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::column(vec![0.5, -1.0])).unwrap();
    store.get_mut(id).grad = Tensor::column(vec![1.0, 0.0]);
    let mut adam = Adam::new(&store, 0.001);
    adam.step(&mut store);
    let v = store.get(id).value.data().to_vec();
    assert!((v[0] - (0.5 - 0.001)).abs() < 1e-9);
    assert_eq!(v[1], -1.0);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn clipping_bounds_the_norm() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::column(vec![0.0, 0.0])).unwrap();
    store.get_mut(id).grad = Tensor::column(vec![30.0, 40.0]);
    assert_eq!(clip_gradients(&mut store, 5.0), 50.0);
    assert!((store.grad_norm() - 5.0).abs() < 1e-12);
    assert_eq!(store.get(id).grad.data(), &[3.0, 4.0]);
}

fn synth(n_docs: usize, seed: u64) -> Corpus {
    let cfg = SynthConfig {
        n_docs,
        seed,
        ..SynthConfig::default()
    };
    generate_corpus(&cfg).unwrap().0
}

fn small_model(enc: Encoder, cmm: bool, pam: bool, vocab_from: &[Document]) -> Model {
    let cfg = ModelConfig {
        embed_dim: 6,
        hidden: 5,
        encoder: enc,
        use_cmm: cmm,
        use_pam: pam,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    Model::new(
        cfg,
        crate::corpus::Vocab::from_documents(vocab_from),
        None,
        &mut RngStream::new(4),
    )
    .unwrap()
}

#[test]
fn graph_losses_match_value_losses() {
    let c = synth(30, 2);
    let docs: Vec<Document> = c.documents()[..8].to_vec();
    let targets: Vec<Targets> = docs.iter().map(derive_targets).collect();
    assert!(targets.iter().any(|t| t.has_pr()));
    for enc in Encoder::ALL {
        let m = small_model(enc, true, true, &docs);
        let cfg = TrainConfig {
            loss_terms: LossTerms::ALL,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let refs: Vec<&Document> = docs.iter().collect();
        let fwd = m.forward(&mut g, &refs, false, true, &mut RngStream::new(0)).unwrap();
        let nodes = batch_loss(&mut g, &m, &fwd, &targets, &cfg).unwrap();
        let outs = fwd.outputs(&g);
        let lp = loss_p(&outs, &targets, cfg.loss_terms).unwrap();
        let probs: Vec<Vec<f64>> = outs.iter().map(|o| o.mask_probs.clone().unwrap()).collect();
        let masks: Vec<Vec<bool>> = targets.iter().map(|t| t.mask.clone()).collect();
        let lm = loss_m(&probs, &masks).unwrap();
        assert!((g.value(nodes.p).item() - lp).abs() < 1e-12);
        assert!((g.value(nodes.m.unwrap()).item() - lm).abs() < 1e-12);
        let expected = total_loss(lp, lm, m.store().squared_norm(), &cfg);
        assert!((g.value(nodes.total).item() - expected).abs() < 1e-12);
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    let c = synth(40, 3);
    let docs = micro_batch(c.documents()).unwrap();
    let small = ModelConfig {
        embed_dim: 4,
        hidden: 3,
        encoder: Encoder::SA,
        ..ModelConfig::default()
    };
    let variants = [
        TrainConfig {
            tau: 0.0,
            gamma: 0.0,
            loss_terms: LossTerms::Y,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 0.0,
            gamma: 0.0,
            loss_terms: "yo".parse().unwrap(),
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 0.0,
            gamma: 0.0,
            loss_terms: "yc".parse().unwrap(),
            ..TrainConfig::default()
        },
        TrainConfig {
            eta: 0.0,
            gamma: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            eta: 0.0,
            tau: 0.0,
            gamma: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            loss_terms: LossTerms::ALL,
            ..TrainConfig::default()
        },
    ];
    for enc in Encoder::ALL {
        for (i, tc) in variants.iter().enumerate() {
            let mc = ModelConfig {
                encoder: enc,
                ..small.clone()
            };
            let r = gradcheck_objective(&mc, tc, &docs, 1, 1e-5).unwrap();
            // Round-off of the central difference is ~1e-11 per unit of
            // objective (tau = 10 here), so near-zero coordinates are bounded
            // absolutely.
            assert!(
                r.max_rel_error_with_floor(1e-5) < 1e-4,
                "{enc} variant {i}: {:?}",
                r.worst
            );
            assert!(r.max_abs_error < 1e-9, "{enc} variant {i}: {}", r.max_abs_error);
        }
    }
}

#[test]
fn mask_gate_learns_through_encoder_without_tau() {
    let c = synth(40, 3);
    let docs = micro_batch(c.documents()).unwrap();
    let targets: Vec<Targets> = docs.iter().map(derive_targets).collect();
    let mut m = small_model(Encoder::SA, true, true, &docs);
    let w_con = m.store().id("w_con").unwrap();
    let mut grad_with = |tau: f64| {
        let cfg = TrainConfig {
            tau,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let refs: Vec<&Document> = docs.iter().collect();
        let fwd = m.forward(&mut g, &refs, false, true, &mut RngStream::new(0)).unwrap();
        let l = batch_loss(&mut g, &m, &fwd, &targets, &cfg).unwrap();
        if tau == 0.0 {
            assert!(l.m.is_some());
        }
        g.backward_into(l.total, m.store_mut()).unwrap();
        m.store().get(w_con).grad.clone()
    };
    let indirect = grad_with(0.0);
    let direct = grad_with(10.0);
    assert!(indirect.sum_squares() > 0.0);
    assert_ne!(indirect, direct);
}

proptest! {
    #[test]
    fn loss_m_ignores_documents_without_pr(
        probs in prop::collection::vec(0.01f64..0.99, 1..5),
        extra in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 0..4), 0..6),
    ) {
        let mut mask = vec![false; probs.len()];
        mask[0] = true;
        let base = loss_m(std::slice::from_ref(&probs), std::slice::from_ref(&mask)).unwrap();
        let mut ps = vec![probs];
        let mut ms = vec![mask];
        for e in extra {
            ms.push(vec![false; e.len()]);
            ps.push(e);
        }
        prop_assert_eq!(loss_m(&ps, &ms).unwrap(), base);
    }
}

fn sampled(n_docs: usize, seed: u64) -> Corpus {
    let cfg = SynthConfig {
        n_docs,
        seed,
        fraction_missing_condition: 0.0,
        ..SynthConfig::default()
    };
    let (c, _) = generate_corpus(&cfg).unwrap();
    build_dataset(&c, 2, &RngStream::new(seed)).unwrap()
}

#[test]
fn folds_partition_and_keep_samples_with_their_source() {
    let c = sampled(40, 1);
    let split = fold_split(&c, 5, &RngStream::new(3)).unwrap();
    let mut all: Vec<&String> = split.folds.iter().flatten().collect();
    assert_eq!(all.len(), c.len());
    all.sort();
    all.dedup();
    assert_eq!(all.len(), c.len());
    for fold in &split.folds {
        assert!(!fold.is_empty());
        for id in fold {
            let d = c.get(id).unwrap();
            if d.origin != crate::corpus::Origin::Original {
                assert!(fold.contains(&d.source_id), "{id} split from {}", d.source_id);
            }
        }
    }
    assert_eq!(split, fold_split(&c, 5, &RngStream::new(3)).unwrap());
    assert_ne!(split, fold_split(&c, 5, &RngStream::new(4)).unwrap());
}

#[test]
fn too_few_sources_for_folds() {
    let c = synth(3, 0);
    assert!(fold_split(&c, 5, &RngStream::new(0)).is_err());
    assert!(fold_split(&c, 1, &RngStream::new(0)).is_err());
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn quick_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn training_is_bitwise_reproducible_and_lowers_the_loss() {
    let c = sampled(30, 2);
    let docs = c.documents().to_vec();
    let run = || {
        let mut m = Model::new(quick_model(), c.vocab().clone(), None, &mut RngStream::new(1)).unwrap();
        let o = train_fold(&mut m, &docs, &[], &quick(), &RngStream::new(2)).unwrap();
        (o, m.store().clone())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(a.epochs, 3);
    assert!(a.epoch_loss[2] < a.epoch_loss[0], "{:?}", a.epoch_loss);
}

#[test]
fn run_cv_reports_fold_means() {
    let c = sampled(30, 3);
    let tc = TrainConfig {
        epochs: 2,
        folds: 3,
        ..quick()
    };
    let (report, models) = run_cv(&c, &quick_model(), &tc, None).unwrap();
    assert_eq!(models.len(), 3);
    let run = &report.runs[0];
    assert_eq!(run.folds.len(), 3);
    let n: usize = run.folds.iter().map(|f| f.n_test).sum();
    assert_eq!(n, c.len());
    let mean_f1 = run.folds.iter().map(|f| f.f1).sum::<f64>() / 3.0;
    assert!((run.mean().f1 - mean_f1).abs() < 1e-12);
    assert!(run.folds.iter().all(|f| f.mask.is_some()));

    let parallel = TrainConfig {
        parallel_folds: 3,
        ..tc
    };
    let (again, _) = run_cv(&c, &quick_model(), &parallel, None).unwrap();
    assert_eq!(again.to_text(), report.to_text());
}

#[test]
fn settings_file_round_trip() {
    let text =
        "# comment\nencoder = bl\ncmm = off\nembed-dim = 16\nloss_terms = y,yc\nclip = off\npatience = 3 # inline\n";
    let pairs = parse_settings(text).unwrap();
    let (mut mc, mut tc) = (ModelConfig::default(), TrainConfig::default());
    apply_settings(&pairs, &mut mc, &mut tc).unwrap();
    assert_eq!((mc.encoder, mc.use_cmm, mc.embed_dim), (Encoder::BL, false, 16));
    assert_eq!(
        tc.loss_terms,
        LossTerms {
            y: true,
            y_o: false,
            y_c: true
        }
    );
    assert_eq!((tc.clip, tc.patience), (None, Some(3)));

    let echo = settings_echo(&mc, &tc);
    let text: String = echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let (mut mc2, mut tc2) = (ModelConfig::default(), TrainConfig::default());
    apply_settings(&parse_settings(&text).unwrap(), &mut mc2, &mut tc2).unwrap();
    assert_eq!((mc2, tc2), (mc, tc));
}

#[test]
fn settings_errors() {
    assert!(parse_settings("eta 0.1").is_err());
    assert!(parse_settings("eta = 1\neta = 2").is_err());
    let (mut mc, mut tc) = (ModelConfig::default(), TrainConfig::default());
    for bad in [
        "colour = red",
        "eta = x",
        "cmm = maybe",
        "loss_terms = z",
        "loss_terms = ",
    ] {
        let pairs = parse_settings(bad).unwrap();
        assert!(apply_settings(&pairs, &mut mc, &mut tc).is_err(), "{bad}");
    }
    assert!(TrainConfig {
        folds: 1,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        tau: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!(LossTerms::default().to_string(), "y,yo");
}
