use exitwise::backbone::{BackboneConfig, Dropout};
use exitwise::exits::{BlockKind, ExitSpec};
use exitwise::losses::{
    composite_ce, cross_entropy, kl_loss, kl_terms, sim_loss, sim_pair, total_loss, LossWeights,
    SimKind, SimLevel,
};
use exitwise::model::{ModelConfig, MultiExitModel};
use exitwise::{Error, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ce_oracle(logits: &[f64], classes: usize, y: &[usize]) -> f64 {
    logits
        .chunks(classes)
        .zip(y)
        .map(|(row, &c)| -softmax(row)[c].ln())
        .sum::<f64>()
        / y.len() as f64
}

fn kl_oracle(p_logits: &[f64], q_logits: &[f64], classes: usize) -> f64 {
    let rows = p_logits.len() / classes;
    p_logits
        .chunks(classes)
        .zip(q_logits.chunks(classes))
        .map(|(a, b)| {
            let (p, q) = (softmax(a), softmax(b));
            p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / rows as f64
}

#[test]
fn uniform_logits_give_log_c() {
    let tape = Tape::new();
    let o = tape.constant(Tensor::<f64>::zeros(&[4, 7]));
    let ce = cross_entropy(&tape, o, &[0, 3, 6, 2]).unwrap();
    assert!((tape.item(ce) - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_oracle() {
    let logits = [2.0, 1.0, 0.1, -1.0, 0.5, 3.0];
    let tape = Tape::new();
    let o = tape.constant(t(&[2, 3], &logits));
    let ce = cross_entropy(&tape, o, &[0, 2]).unwrap();
    assert!((tape.item(ce) - ce_oracle(&logits, 3, &[0, 2])).abs() < 1e-12);
    // First row alone: -ln(e^2 / (e^2 + e^1 + e^0.1)) ≈ 0.4170.
    let single = cross_entropy(&tape, tape.constant(t(&[1, 3], &logits[..3])), &[0]).unwrap();
    assert!((tape.item(single) - 0.41702966).abs() < 1e-6);
    assert!(cross_entropy(&tape, o, &[0, 3]).is_err());
}

#[test]
fn composite_ce_weights_students_by_gamma() {
    let logits = [0.3, -0.2, 1.0, 0.0, 0.7, -0.4];
    let tape = Tape::new();
    let o = tape.constant(t(&[2, 3], &logits));
    let y = [1, 0];
    let ce = ce_oracle(&logits, 3, &y);
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let (total, ce_t, ce_s) = composite_ce(&tape, o, &[o, o], &y, gamma).unwrap();
        assert!((tape.item(total) - (1.0 + gamma) * ce).abs() < 1e-12);
        assert!((tape.item(ce_t) - ce).abs() < 1e-12);
        assert_eq!(ce_s.len(), 2);
    }
    let (total, _, ce_s) = composite_ce(&tape, o, &[], &y, 1.0).unwrap();
    assert!(ce_s.is_empty());
    assert!((tape.item(total) - ce).abs() < 1e-12);
    let wrong = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
    assert!(matches!(
        composite_ce(&tape, o, &[wrong], &y, 1.0),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn kl_matches_oracle_and_vanishes_on_identical_logits() {
    let a = [1.0, 0.0, -1.0, 0.2, 0.2, 0.9];
    let b = [0.0, 0.5, 0.5, -2.0, 1.0, 0.0];
    let tape = Tape::new();
    let (va, vb) = (tape.constant(t(&[2, 3], &a)), tape.constant(t(&[2, 3], &b)));
    let kl = kl_loss(&tape, va, &[vb], 1.0, true).unwrap();
    assert!((tape.item(kl) - kl_oracle(&a, &b, 3)).abs() < 1e-12);
    let same = kl_loss(&tape, va, &[va], 1.0, true).unwrap();
    assert!(tape.item(same).abs() < 1e-15);
    // Against a uniform student, KL = ln C - H(p).
    let z = tape.constant(Tensor::<f64>::zeros(&[1, 3]));
    let p = softmax(&a[..3]);
    let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    let kl_u = kl_loss(&tape, tape.constant(t(&[1, 3], &a[..3])), &[z], 1.0, true).unwrap();
    assert!((tape.item(kl_u) - (3f64.ln() - h)).abs() < 1e-12);
    // Without students the term is zero.
    assert_eq!(tape.item(kl_loss(&tape, va, &[], 1.0, true).unwrap()), 0.0);
}

#[test]
fn kl_temperature_divides_both_sides() {
    let a = [1.0, 0.0, -1.0];
    let b = [0.0, 0.5, 0.5];
    let tape = Tape::new();
    let kl = kl_loss(&tape, tape.constant(t(&[1, 3], &a)), &[tape.constant(t(&[1, 3], &b))], 2.0, true).unwrap();
    let half = |x: &[f64]| x.iter().map(|v| v / 2.0).collect::<Vec<_>>();
    assert!((tape.item(kl) - kl_oracle(&half(&a), &half(&b), 3)).abs() < 1e-12);
}

#[test]
fn kl_gradient_is_local_to_each_exit() {
    let a = [1.0, 0.0, -1.0, 0.2, 0.2, 0.9];
    let s1 = [0.0, 0.5, 0.5, -2.0, 1.0, 0.0];
    let s2 = [0.3, 0.3, 0.1, 0.0, 0.0, 0.0];
    let tape = Tape::new();
    let teacher = tape.leaf(t(&[2, 3], &a));
    let v1 = tape.leaf(t(&[2, 3], &s1));
    let v2 = tape.leaf(t(&[2, 3], &s2));
    let terms = kl_terms(&tape, teacher, &[v1, v2], 1.0, true).unwrap();
    let g = tape.backward(terms[0]).unwrap();
    assert!(g.get(teacher).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert!(g.get(v2).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    // d KL / d student logits = (q - p) / B.
    let g1 = g.get(v1).unwrap();
    for r in 0..2 {
        let p = softmax(&a[r * 3..r * 3 + 3]);
        let q = softmax(&s1[r * 3..r * 3 + 3]);
        for c in 0..3 {
            assert!((g1[r * 3 + c] - (q[c] - p[c]) / 2.0).abs() < 1e-12);
        }
    }

    let tape = Tape::new();
    let teacher = tape.leaf(t(&[2, 3], &a));
    let v1 = tape.leaf(t(&[2, 3], &s1));
    let kl = kl_loss(&tape, teacher, &[v1], 1.0, false).unwrap();
    let g = tape.backward(kl).unwrap();
    assert!(g.get(teacher).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn duplicated_exits_leave_averaged_terms_unchanged() {
    let a = [1.0, 0.0, -1.0, 0.2, 0.2, 0.9];
    let s = [0.0, 0.5, 0.5, -2.0, 1.0, 0.0];
    let tape = Tape::new();
    let (va, vs) = (tape.constant(t(&[2, 3], &a)), tape.constant(t(&[2, 3], &s)));
    let y = [0, 2];
    let one_kl = tape.item(kl_loss(&tape, va, &[vs], 1.0, true).unwrap());
    let one_ce = tape.item(composite_ce(&tape, va, &[vs], &y, 1.0).unwrap().0);
    let one_sim = tape.item(sim_loss(&tape, SimKind::L2, &[(va, vs)], true).unwrap());
    for k in 2..5 {
        let many = vec![vs; k];
        let pairs = vec![(va, vs); k];
        assert!((tape.item(kl_loss(&tape, va, &many, 1.0, true).unwrap()) - one_kl).abs() < 1e-12);
        assert!((tape.item(composite_ce(&tape, va, &many, &y, 1.0).unwrap().0) - one_ce).abs() < 1e-12);
        assert!((tape.item(sim_loss(&tape, SimKind::L2, &pairs, true).unwrap()) - one_sim).abs() < 1e-12);
    }
}

#[test]
fn similarity_kinds_match_oracles() {
    let u = [1.0, 2.0, -1.0, 0.0, 3.0, 4.0];
    let v = [0.5, 2.0, 1.0, 1.0, 3.0, 0.0];
    let tape = Tape::new();
    let (vu, vv) = (tape.constant(t(&[2, 3], &u)), tape.constant(t(&[2, 3], &v)));
    let l1: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
    let l2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0;
    let cos: f64 = u
        .chunks(3)
        .zip(v.chunks(3))
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        })
        .sum::<f64>()
        / 2.0;
    let expect = [
        (SimKind::L1, l1),
        (SimKind::L2, l2),
        (SimKind::Cosine, -cos),
        (SimKind::L1Cosine, l1 - cos),
        (SimKind::L2Cosine, l2 - cos),
    ];
    for (kind, want) in expect {
        let got = tape.item(sim_pair(&tape, kind, vu, vv).unwrap());
        assert!((got - want).abs() < 1e-12, "{kind}: {got} vs {want}");
    }
    for kind in [SimKind::L1, SimKind::L2] {
        assert_eq!(tape.item(sim_pair(&tape, kind, vu, vu).unwrap()), 0.0);
    }
    assert!((tape.item(sim_pair(&tape, SimKind::Cosine, vu, vu).unwrap()) + 1.0).abs() < 1e-12);
    let w = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
    assert!(matches!(sim_pair(&tape, SimKind::L2, vu, w), Err(Error::Shape { .. })));
}

#[test]
fn weights_and_names_validate() {
    assert!(LossWeights::default().validate().is_ok());
    let neg = LossWeights {
        alpha: -1.0,
        ..Default::default()
    };
    assert!(matches!(neg.validate(), Err(Error::Config(_))));
    let cold = LossWeights {
        temperature: 0.0,
        ..Default::default()
    };
    assert!(cold.validate().is_err());
    for k in SimKind::ALL {
        assert_eq!(k.as_str().parse::<SimKind>().unwrap(), k);
    }
    assert_eq!("L1 + Cosine".parse::<SimKind>().unwrap(), SimKind::L1Cosine);
    assert!("huber".parse::<SimKind>().is_err());
}

fn small_model(kind: BlockKind) -> MultiExitModel<f64> {
    let b = BackboneConfig {
        num_layers: 3,
        hidden: 8,
        heads: 2,
        ff_dim: 16,
        head_dims: [6, 4],
        encoder_convs: vec![exitwise::backbone::ConvSpec {
            out_channels: 8,
            kernel: 4,
            stride: 2,
        }],
        ..Default::default()
    };
    let exits = vec![ExitSpec { layer: 1, block: kind }, ExitSpec { layer: 2, block: BlockKind::Conv }];
    MultiExitModel::new(ModelConfig::new(b, exits).unwrap(), 4).unwrap()
}

#[test]
fn total_loss_decomposes_into_reported_terms() {
    let m = small_model(BlockKind::Gru);
    let wave = Tensor::new(vec![3, 20], (0..60).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect()).unwrap();
    let y = [0, 3, 1];
    for (alpha, beta, gamma) in [(1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (0.3, 2.0, 0.5)] {
        for level in [SimLevel::Embedding, SimLevel::Linear] {
            let w = LossWeights {
                alpha,
                beta,
                gamma,
                sim_level: level,
                ..Default::default()
            };
            let tape = Tape::new();
            let p = m.bind(&tape, true);
            let x = tape.constant(wave.clone());
            let out = m.forward(&p, x, &Dropout::OFF).unwrap();
            let (total, r) = total_loss(&tape, &out, &y, &w).unwrap();
            assert_eq!(tape.item(total), r.total);
            assert!(r.decomposition_error(&w) < 1e-12);
            assert_eq!(r.per_exit.len(), 2);
            assert!(r.first_non_finite().is_none());
            if alpha == 0.0 && beta == 0.0 && gamma == 0.0 {
                assert_eq!(r.total, r.ce_teacher);
            }
            let mean_ce = r.per_exit.iter().map(|e| e.ce).sum::<f64>() / 2.0;
            assert!((mean_ce - r.ce_students).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn kl_and_ce_are_nonnegative(
        a in prop::collection::vec(-8.0f64..8.0, 12),
        b in prop::collection::vec(-8.0f64..8.0, 12),
        y in prop::collection::vec(0usize..4, 3),
    ) {
        let tape = Tape::new();
        let (va, vb) = (tape.constant(t(&[3, 4], &a)), tape.constant(t(&[3, 4], &b)));
        let kl = tape.item(kl_loss(&tape, va, &[vb], 1.0, true).unwrap());
        prop_assert!(kl >= -1e-12);
        prop_assert!((kl - kl_oracle(&a, &b, 4)).abs() < 1e-9);
        let ce = tape.item(cross_entropy(&tape, va, &y).unwrap());
        prop_assert!(ce >= 0.0);
        prop_assert!((ce - ce_oracle(&a, 4, &y)).abs() < 1e-9);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(
        u in prop::collection::vec(-5.0f64..5.0, 8),
        v in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let tape = Tape::new();
        let (vu, vv) = (tape.constant(t(&[2, 4], &u)), tape.constant(t(&[2, 4], &v)));
        for kind in SimKind::ALL {
            let a = tape.item(sim_pair(&tape, kind, vu, vv).unwrap());
            let b = tape.item(sim_pair(&tape, kind, vv, vu).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }
        let c = tape.item(sim_pair(&tape, SimKind::Cosine, vu, vv).unwrap());
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
    }
}
