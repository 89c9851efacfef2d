use exitwise::backbone::{BackboneConfig, Dropout};
use exitwise::exits::{BlockKind, Exit, ExitSpec};
use exitwise::model::{ModelConfig, MultiExitModel};
use exitwise::nn::params::{Init, ParamStore};
use exitwise::nn::recurrent::{Gru, Lstm};
use exitwise::{Error, ExitId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn base() -> MultiExitModel<f32> {
    MultiExitModel::new(ModelConfig::new(BackboneConfig::default(), vec![]).unwrap(), 3).unwrap()
}

fn spec(layer: usize, block: BlockKind) -> ExitSpec {
    ExitSpec { layer, block }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_pointwise_block_passes_activations_through() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let exit = Exit::new(spec(2, BlockKind::Conv), 8, [5, 3], &mut store, &mut init).unwrap();
    let w = store.id("exit.2.conv.block.weight").unwrap();
    let b = store.id("exit.2.conv.block.bias").unwrap();
    let v = &mut store.get_mut(w).value;
    v.data_mut().fill(0.0);
    for i in 0..8 {
        v.data_mut()[i * 8 + i] = 1.0;
    }
    store.get_mut(b).value.data_mut().fill(0.0);

    let x = random(&[2, 4, 8], 1);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let m = exit.block_forward(&p, xv).unwrap();
    assert_eq!(tape.value(m).data(), x.data());
    let out = exit.forward(&p, xv).unwrap();
    assert_eq!(tape.shape(out.logits), vec![2, 3]);
    // Pooled block output equals the frame mean of the input.
    let pooled = tape.value(out.pooled).clone();
    for bi in 0..2 {
        for c in 0..8 {
            let mean = (0..4).map(|f| x.data()[(bi * 4 + f) * 8 + c]).sum::<f64>() / 4.0;
            assert!((pooled.data()[bi * 8 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn all_zero_gru_emits_zeros() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let gru = Gru::new(&mut store, &mut init, "g", 6, 6).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(random(&[3, 5, 6], 2));
    let y = gru.forward(&p, x).unwrap();
    assert_eq!(tape.shape(y), vec![3, 5, 6]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_matches_hand_unrolled_scalar_cell() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let lstm = Lstm::new(&mut store, &mut init, "l", 1, 1).unwrap();
    let w_ih = [0.5, -0.3, 0.8, 0.2];
    let w_hh = [0.1, 0.4, -0.6, 0.7];
    let bias = [0.05, 0.5, -0.1, 0.0];
    store.get_mut(lstm.w_ih).value.data_mut().copy_from_slice(&w_ih);
    store.get_mut(lstm.w_hh).value.data_mut().copy_from_slice(&w_hh);
    store.get_mut(lstm.bias).value.data_mut().copy_from_slice(&bias);

    let xs = [1.0, 1.0, 2.0];
    let (mut h, mut c) = (0.0f64, 0.0f64);
    let mut expected = vec![];
    for &x in &xs {
        let pre: Vec<f64> = (0..4).map(|k| x * w_ih[k] + h * w_hh[k] + bias[k]).collect();
        let (i, f, g, o) = (sigmoid(pre[0]), sigmoid(pre[1]), pre[2].tanh(), sigmoid(pre[3]));
        c = f * c + i * g;
        h = o * c.tanh();
        expected.push(h);
    }

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Tensor::new(vec![1, 3, 1], xs.to_vec()).unwrap());
    let y = lstm.forward(&p, x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn gru_matches_hand_unrolled_scalar_cell() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let gru = Gru::new(&mut store, &mut init, "g", 1, 1).unwrap();
    let (w_ih, w_hh) = ([0.3, -0.2, 0.9], [0.5, 0.1, -0.4]);
    let (b_ih, b_hh) = ([0.0, 0.2, -0.1], [0.1, -0.3, 0.25]);
    store.get_mut(gru.w_ih).value.data_mut().copy_from_slice(&w_ih);
    store.get_mut(gru.w_hh).value.data_mut().copy_from_slice(&w_hh);
    store.get_mut(gru.b_ih).value.data_mut().copy_from_slice(&b_ih);
    store.get_mut(gru.b_hh).value.data_mut().copy_from_slice(&b_hh);

    let xs = [0.5, -1.0, 2.0, 0.0];
    let mut h = 0.0f64;
    let mut expected = vec![];
    for &x in &xs {
        let r = sigmoid(x * w_ih[0] + b_ih[0] + h * w_hh[0] + b_hh[0]);
        let z = sigmoid(x * w_ih[1] + b_ih[1] + h * w_hh[1] + b_hh[1]);
        let n = (x * w_ih[2] + b_ih[2] + r * (h * w_hh[2] + b_hh[2])).tanh();
        h = (1.0 - z) * n + z * h;
        expected.push(h);
    }

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Tensor::new(vec![1, 4, 1], xs.to_vec()).unwrap());
    let y = gru.forward(&p, x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn every_block_kind_produces_class_logits() {
    let kinds = [BlockKind::Conv, BlockKind::Conv1ch, BlockKind::Lstm, BlockKind::Gru];
    for (i, kind) in kinds.into_iter().enumerate() {
        let m = base().attach_exits(&[spec(2, kind)], 9).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let x = tape.constant(Tensor::<f32>::zeros(&[3, 48]));
        let out = m.forward_exit(&p, x, ExitId::Layer(2)).unwrap();
        assert_eq!(tape.shape(out.logits), vec![3, 7], "{kind}");
        assert_eq!(tape.shape(out.pooled), vec![3, kind.out_width(64)], "{kind}");
        assert!(tape.value(out.logits).is_finite());
        let expected = Exit::num_params(&spec(2, kind), 64, [32, 7]);
        let actual: u64 = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("exit."))
            .map(|(_, p)| p.value.numel() as u64)
            .sum();
        assert_eq!(actual, expected, "case {i}");
    }
}

#[test]
fn exit_parameters_are_namespaced_and_disjoint() {
    let m = base()
        .attach_exits(&[spec(2, BlockKind::Lstm), spec(4, BlockKind::Gru)], 1)
        .unwrap();
    let names: Vec<&str> = m.params.iter().map(|(_, p)| p.name.as_str()).collect();
    let two: Vec<_> = names.iter().filter(|n| n.starts_with("exit.2.lstm.")).collect();
    let four: Vec<_> = names.iter().filter(|n| n.starts_with("exit.4.gru.")).collect();
    assert!(!two.is_empty() && !four.is_empty());
    let exit_total = names.iter().filter(|n| n.starts_with("exit.")).count();
    assert_eq!(two.len() + four.len(), exit_total);
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn attach_exits_keeps_backbone_and_is_seeded() {
    let plain = base();
    let a = base().attach_exits(&[spec(3, BlockKind::Gru)], 5).unwrap();
    let b = base().attach_exits(&[spec(3, BlockKind::Gru)], 5).unwrap();
    for (_, p) in plain.params.iter() {
        assert_eq!(a.params.by_name(&p.name).unwrap().value.data(), p.value.data());
    }
    for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
}

#[test]
fn attach_exits_rejects_bad_layers() {
    assert!(matches!(
        base().attach_exits(&[spec(6, BlockKind::Conv)], 0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        base().attach_exits(&[spec(0, BlockKind::Conv)], 0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        base().attach_exits(&[spec(2, BlockKind::Conv), spec(2, BlockKind::Gru)], 0),
        Err(Error::Config(_))
    ));
    let one = base().attach_exits(&[spec(2, BlockKind::Conv)], 0).unwrap();
    assert!(matches!(
        one.attach_exits(&[spec(2, BlockKind::Lstm)], 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn joint_forward_runs_each_layer_once() {
    let m = base()
        .attach_exits(
            &[spec(1, BlockKind::Conv), spec(2, BlockKind::Lstm), spec(4, BlockKind::Gru)],
            2,
        )
        .unwrap();
    m.reset_layer_counter();
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[2, 48]));
    let out = m.forward(&p, x, &Dropout::OFF).unwrap();
    assert_eq!(out.exits.len(), 3);
    assert_eq!(m.layers_executed(), 6);

    m.reset_layer_counter();
    m.forward_exit(&p, x, ExitId::Layer(2)).unwrap();
    assert_eq!(m.layers_executed(), 2);
}

#[test]
fn exits_do_not_depend_on_each_other() {
    let mut m = base()
        .attach_exits(&[spec(2, BlockKind::Conv), spec(4, BlockKind::Lstm)], 2)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let wave = Tensor::new(vec![2, 48], (0..96).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let before4 = m.predict_proba(&wave, ExitId::Layer(4)).unwrap();
    let before_t = m.predict_proba(&wave, ExitId::Teacher).unwrap();
    let before2 = m.predict_proba(&wave, ExitId::Layer(2)).unwrap();
    for p in m.params.iter_mut().filter(|p| p.name.starts_with("exit.2.")) {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(m.predict_proba(&wave, ExitId::Layer(4)).unwrap().data(), before4.data());
    assert_eq!(m.predict_proba(&wave, ExitId::Teacher).unwrap().data(), before_t.data());
    assert_ne!(m.predict_proba(&wave, ExitId::Layer(2)).unwrap().data(), before2.data());
}

#[test]
fn exit_ids_parse_and_order() {
    assert_eq!("layer4".parse::<ExitId>().unwrap(), ExitId::Layer(4));
    assert_eq!("4".parse::<ExitId>().unwrap(), ExitId::Layer(4));
    assert_eq!("teacher".parse::<ExitId>().unwrap(), ExitId::Teacher);
    assert_eq!("deepest".parse::<ExitId>().unwrap(), ExitId::Teacher);
    assert!(matches!("middle".parse::<ExitId>(), Err(Error::UnknownExit(_))));
    assert!(ExitId::Layer(2) < ExitId::Layer(10));
    assert!(ExitId::Layer(10) < ExitId::Teacher);
    assert_eq!(ExitId::Layer(3).to_string(), "layer3");
    assert_eq!("cnn".parse::<BlockKind>().unwrap(), BlockKind::Conv);
    assert!("rnn".parse::<BlockKind>().is_err());
    let m = base().attach_exits(&[spec(2, BlockKind::Conv)], 0).unwrap();
    assert!(matches!(m.config.depth_of(ExitId::Layer(3)), Err(Error::UnknownExit(_))));
}
