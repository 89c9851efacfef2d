use exitwise::backbone::{BackboneConfig, ConvSpec, Dropout};
use exitwise::checkpoint::{Container, MAGIC};
use exitwise::model::{ModelConfig, MultiExitModel};
use exitwise::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(n: usize) -> MultiExitModel<f32> {
    let b = BackboneConfig {
        num_layers: n,
        ..Default::default()
    };
    MultiExitModel::new(ModelConfig::new(b, vec![]).unwrap(), 11).unwrap()
}

fn random_wave(b: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![b, s], data).unwrap()
}

#[test]
fn config_invariants() {
    let bad_heads = BackboneConfig {
        heads: 3,
        ..Default::default()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let shallow = BackboneConfig {
        num_layers: 1,
        ..Default::default()
    };
    assert!(matches!(shallow.validate(), Err(Error::Config(_))));
    assert!(BackboneConfig::default().validate().is_ok());
}

#[test]
fn zero_waveform_gives_finite_features() {
    let m = model(6);
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[2, 48]));
    let f = m.backbone.feature_encode(&p, x).unwrap();
    let v = tape.value(f);
    assert_eq!(v.shape(), &[2, m.config.backbone.frames(48).unwrap(), 64]);
    assert!(v.is_finite());
}

#[test]
fn frame_count_matches_stride_arithmetic() {
    let cfg = BackboneConfig::default();
    // Two kernel-5 stride-2 convolutions: F = ((S - 5)/2 + 1 - 5)/2 + 1.
    for s in [13usize, 17, 45, 48, 101, 1000] {
        let l1 = (s - 5) / 2 + 1;
        let l2 = (l1 - 5) / 2 + 1;
        assert_eq!(cfg.frames(s).unwrap(), l2, "S = {s}");
    }
    // Shortest input for F frames is 4(F - 1) + 13.
    for f in 1..20 {
        assert_eq!(cfg.frames(4 * (f - 1) + 13).unwrap(), f);
        assert_eq!(cfg.frames(4 * (f - 1) + 12).unwrap_or(0), f - 1);
    }
}

#[test]
fn too_short_input_reports_minimum() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.min_samples(), 13);
    assert!(cfg.frames(13).is_ok());
    match cfg.frames(12) {
        Err(Error::InputTooShort { got: 12, min: 13 }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let m = model(2);
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 8]));
    assert!(matches!(
        m.backbone.feature_encode(&p, x),
        Err(Error::InputTooShort { .. })
    ));
}

#[test]
fn doubling_batch_leaves_rows_bit_identical() {
    let m = model(3);
    let single = random_wave(1, 48, 1);
    let mut doubled = single.data().to_vec();
    doubled.extend_from_slice(single.data());
    let doubled = Tensor::new(vec![2, 48], doubled).unwrap();
    let run = |w: &Tensor<f32>| {
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let x = tape.constant(w.clone());
        let hs = m.backbone.forward_to_layer(&p, x, 3, &[3], &Dropout::OFF).unwrap();
        let v = tape.value(hs.get(3).unwrap()).data().to_vec();
        v
    };
    let a = run(&single);
    let b = run(&doubled);
    assert_eq!(&b[..a.len()], &a[..]);
    assert_eq!(&b[a.len()..], &a[..]);
}

#[test]
fn forward_to_layer_runs_exactly_k_layers() {
    let m = model(6);
    let wave = random_wave(2, 48, 2);
    for k in 1..=6 {
        m.reset_layer_counter();
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let x = tape.constant(wave.clone());
        let hs = m.backbone.forward_to_layer(&p, x, k, &[k], &Dropout::OFF).unwrap();
        assert_eq!(m.layers_executed(), k);
        assert_eq!(hs.computed, k);
    }
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(wave);
    let hs = m.backbone.forward_to_layer(&p, x, 4, &[2, 4], &Dropout::OFF).unwrap();
    assert_eq!(hs.states.len(), 2);
    let shapes: Vec<_> = hs.states.iter().map(|(_, v)| tape.shape(*v)).collect();
    assert_eq!(shapes[0], shapes[1]);
    assert!(matches!(
        m.backbone.forward_to_layer(&p, x, 7, &[7], &Dropout::OFF),
        Err(Error::IndexOutOfRange { index: 7, max: 6 })
    ));
    assert!(matches!(
        m.backbone.forward_to_layer(&p, x, 0, &[], &Dropout::OFF),
        Err(Error::IndexOutOfRange { .. })
    ));
    assert!(matches!(
        m.backbone.forward_to_layer(&p, x, 3, &[4], &Dropout::OFF),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn early_stopping_keeps_prefixes_identical() {
    let m = model(6);
    let wave = random_wave(3, 60, 3);
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(wave);
    let all: Vec<usize> = (1..=6).collect();
    let full = m.backbone.forward_to_layer(&p, x, 6, &all, &Dropout::OFF).unwrap();
    for k in 1..=6 {
        let retain: Vec<usize> = (1..=k).collect();
        let part = m.backbone.forward_to_layer(&p, x, k, &retain, &Dropout::OFF).unwrap();
        for j in 1..=k {
            assert_eq!(
                tape.value(part.get(j).unwrap()).data(),
                tape.value(full.get(j).unwrap()).data()
            );
        }
    }
}

#[test]
fn teacher_head_shapes_and_zero_map() {
    let mut m = model(2);
    let wave = random_wave(4, 48, 4);
    {
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let x = tape.constant(wave.clone());
        let out = m.forward_exit(&p, x, exitwise::ExitId::Teacher).unwrap();
        assert_eq!(tape.shape(out.logits), vec![4, 7]);
        assert_eq!(tape.shape(out.pooled), vec![4, 64]);
        assert_eq!(tape.shape(out.hidden), vec![4, 32]);
    }
    m.params.set_trainable(|_| true, true);
    for name in ["head.l1.weight", "head.l1.bias", "head.l2.weight", "head.l2.bias"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).value.data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let p = m.bind(&tape, false);
    let x = tape.constant(wave);
    let out = m.forward_exit(&p, x, exitwise::ExitId::Teacher).unwrap();
    assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_inputs_give_identical_logit_rows() {
    let m = model(2);
    let row = random_wave(1, 48, 5);
    let wave = Tensor::new(vec![3, 48], row.data().repeat(3)).unwrap();
    let probs = m.predict_proba(&wave, exitwise::ExitId::Teacher).unwrap();
    let r0 = probs.row(0).to_vec();
    assert_eq!(probs.row(1), &r0[..]);
    assert_eq!(probs.row(2), &r0[..]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = MultiExitModel::<f32>::load(m.config.clone(), &path).unwrap();
    assert_eq!(back.params.len(), m.params.len());
    for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.shape(), b.value.shape());
        let bits_a: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{}", a.name);
    }
}

#[test]
fn checkpoint_layout_is_exact() {
    let m = model(2);
    let bytes = m.to_container().encode();
    assert_eq!(&bytes[..8], &MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(
        u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        m.config.arch_hash()
    );
    assert_eq!(
        u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize,
        m.params.len()
    );
    // First tensor: length-prefixed name, rank byte, u64 extents, f32 payload.
    let (_, first) = m.params.iter().next().unwrap();
    let name_len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    assert_eq!(&bytes[24..24 + name_len], first.name.as_bytes());
    let mut pos = 24 + name_len;
    assert_eq!(bytes[pos] as usize, first.value.rank());
    pos += 1;
    for &d in first.value.shape() {
        assert_eq!(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()), d as u64);
        pos += 8;
    }
    let v0 = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    assert_eq!(v0.to_bits(), first.value.data()[0].to_bits());
    // Payload sizes add up to the whole file.
    let expected: usize = 20
        + m.params
            .iter()
            .map(|(_, p)| 4 + p.name.len() + 1 + 8 * p.value.rank() + 4 * p.value.numel())
            .sum::<usize>();
    assert_eq!(bytes.len(), expected);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let m = model(4);
    let bytes = m.to_container().encode();

    let other = model(5);
    let err = MultiExitModel::<f32>::from_container(other.config.clone(), &Container::decode(&bytes).unwrap());
    assert!(matches!(err, Err(Error::ArchitectureMismatch { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::decode(&bad), Err(Error::BadMagic { .. })));

    let mut v2 = bytes.clone();
    v2[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Container::decode(&v2), Err(Error::UnsupportedVersion(2))));

    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(Container::decode(cut), Err(Error::Truncated(_))));
    for cut in [0, 5, 19, bytes.len() - 1] {
        assert!(Container::decode(&bytes[..cut]).is_err(), "cut {cut}");
    }

    let mut wrong_shape = m.to_container();
    wrong_shape.tensors[0].shape = vec![1, wrong_shape.tensors[0].data.len()];
    let err = MultiExitModel::<f32>::from_container(m.config.clone(), &wrong_shape);
    assert!(matches!(err, Err(Error::TensorTable { .. })));

    let mut missing = m.to_container();
    missing.tensors.pop();
    let err = MultiExitModel::<f32>::from_container(m.config.clone(), &missing);
    assert!(matches!(err, Err(Error::TensorTable { .. })));
}

#[test]
fn truncated_file_on_disk_returns_no_model() {
    let m = model(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    let bytes = m.to_container().encode();
    std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
    assert!(matches!(
        MultiExitModel::<f32>::load(m.config.clone(), &path),
        Err(Error::Truncated(_))
    ));
}

#[test]
fn architecture_hash_tracks_config() {
    let a = ModelConfig::new(BackboneConfig::default(), vec![]).unwrap();
    let mut b = a.clone();
    b.backbone.encoder_convs[0] = ConvSpec {
        out_channels: 64,
        kernel: 3,
        stride: 2,
    };
    assert_ne!(a.arch_hash(), b.arch_hash());
    assert_eq!(a.arch_hash(), a.clone().arch_hash());
}
