use std::collections::BTreeSet;
use std::f64::consts::TAU;

use exitwise::data::{
    class_counts, fit_length, ingest_manifest, ingest_wav, load_corpus, read_manifest, read_wav,
    save_corpus, split_speaker_disjoint, synth_corpus, write_wav, Batcher, LabeledClip, SynthConfig,
};
use exitwise::metrics::ConfusionMatrix;
use exitwise::Error;

fn small() -> SynthConfig {
    SynthConfig {
        n_per_class: 20,
        ..Default::default()
    }
}

#[test]
fn synth_is_deterministic_and_balanced() {
    let cfg = SynthConfig {
        n_per_class: 100,
        ..Default::default()
    };
    let a = synth_corpus(&cfg).unwrap();
    let b = synth_corpus(&cfg).unwrap();
    assert_eq!(a.len(), 700);
    assert_eq!(class_counts(&a, 7), vec![100; 7]);
    for (x, y) in a.iter().zip(&b) {
        let bx: Vec<u32> = x.samples.iter().map(|v| v.to_bits()).collect();
        let by: Vec<u32> = y.samples.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by);
        assert_eq!((x.label, &x.speaker), (y.label, &y.speaker));
    }
    let other = synth_corpus(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(other[0].samples, a[0].samples);
    for c in &a {
        assert_eq!(c.samples.len(), 48);
        assert!(c.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(c.label < 7);
    }
    assert!(synth_corpus(&SynthConfig { n_per_class: 0, ..Default::default() }).is_err());
}

/// Magnitude spectrum of one clip, normalized to unit sum.
fn histogram(samples: &[f32]) -> Vec<f64> {
    let n = samples.len();
    let bins: Vec<f64> = (1..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &s) in samples.iter().enumerate() {
                let a = TAU * (k * t) as f64 / n as f64;
                re += s as f64 * a.cos();
                im -= s as f64 * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect();
    let total: f64 = bins.iter().sum::<f64>().max(1e-12);
    bins.into_iter().map(|b| b / total).collect()
}

#[test]
fn nearest_centroid_baseline_is_above_chance_and_imperfect() {
    let corpus = synth_corpus(&SynthConfig::default()).unwrap();
    let (train, _, test) = split_speaker_disjoint(&corpus, [0.7, 0.15, 0.15], 0).unwrap();
    let dim = histogram(&train[0].samples).len();
    let mut centroids = vec![vec![0.0; dim]; 7];
    let counts = class_counts(&train, 7);
    for c in &train {
        for (acc, v) in centroids[c.label].iter_mut().zip(histogram(&c.samples)) {
            *acc += v / counts[c.label] as f64;
        }
    }
    let predict = |clip: &LabeledClip| {
        let h = histogram(&clip.samples);
        (0..7)
            .min_by(|&a, &b| {
                let d = |c: usize| centroids[c].iter().zip(&h).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap()
    };
    let truth: Vec<usize> = test.iter().map(|c| c.label).collect();
    let pred: Vec<usize> = test.iter().map(predict).collect();
    let uar = ConfusionMatrix::from_predictions(7, &truth, &pred).unwrap().uar().unwrap();
    assert!(uar > 100.0 / 7.0 && uar < 100.0, "baseline UAR {uar}");
}

fn speakers(clips: &[LabeledClip]) -> BTreeSet<String> {
    clips.iter().map(|c| c.speaker.clone()).collect()
}

#[test]
fn speaker_split_is_disjoint_and_seeded() {
    let corpus = synth_corpus(&small()).unwrap();
    let (a, b, c) = split_speaker_disjoint(&corpus, [0.7, 0.15, 0.15], 3).unwrap();
    assert_eq!(a.len() + b.len() + c.len(), corpus.len());
    let (sa, sb, sc) = (speakers(&a), speakers(&b), speakers(&c));
    assert!(sa.is_disjoint(&sb) && sa.is_disjoint(&sc) && sb.is_disjoint(&sc));
    assert!(!sa.is_empty() && !sb.is_empty() && !sc.is_empty());
    let again = split_speaker_disjoint(&corpus, [0.7, 0.15, 0.15], 3).unwrap();
    assert_eq!(speakers(&again.0), sa);
    assert_eq!(speakers(&again.1), sb);
}

#[test]
fn three_speakers_get_one_partition_each() {
    let cfg = SynthConfig {
        speakers: 3,
        ..small()
    };
    let corpus = synth_corpus(&cfg).unwrap();
    let third = 1.0 / 3.0;
    let (a, b, c) = split_speaker_disjoint(&corpus, [third, third, 1.0 - 2.0 * third], 0).unwrap();
    for part in [&a, &b, &c] {
        assert_eq!(speakers(part).len(), 1);
    }
    let two = synth_corpus(&SynthConfig { speakers: 2, ..small() }).unwrap();
    assert!(matches!(
        split_speaker_disjoint(&two, [0.5, 0.25, 0.25], 0),
        Err(Error::Config(_))
    ));
    assert!(split_speaker_disjoint(&corpus, [0.5, 0.5, 0.5], 0).is_err());
}

#[test]
fn wav_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let clip = &synth_corpus(&small()).unwrap()[5];
    let path = dir.path().join("clip.wav");
    write_wav(&path, &clip.samples, clip.sample_rate).unwrap();
    let (back, rate) = read_wav(&path).unwrap();
    assert_eq!(rate, clip.sample_rate);
    assert_eq!(back.len(), clip.samples.len());
    for (a, b) in back.iter().zip(&clip.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
}

fn write_raw(path: &std::path::Path, channels: u16, bits: u16, float: bool, samples: &[i32]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: 8000,
        bits_per_sample: bits,
        sample_format: if float { hound::SampleFormat::Float } else { hound::SampleFormat::Int },
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        if float {
            w.write_sample(s as f32 / 4.0).unwrap();
        } else if bits == 16 {
            w.write_sample(s as i16).unwrap();
        } else {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn wav_encodings_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let max = dir.path().join("max.wav");
    write_raw(&max, 1, 16, false, &[32767, -32768, 0]);
    let (s, _) = read_wav(&max).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-4 && s[0] <= 1.0);
    assert_eq!(s[1], -1.0);

    let float = dir.path().join("float.wav");
    write_raw(&float, 1, 32, true, &[1, -2, 0]);
    assert_eq!(read_wav(&float).unwrap().0, vec![0.25, -0.5, 0.0]);

    let stereo = dir.path().join("stereo.wav");
    write_raw(&stereo, 2, 16, false, &[1, 2, 3, 4]);
    assert!(matches!(read_wav(&stereo), Err(Error::WavUnsupported { .. })));

    let pcm24 = dir.path().join("pcm24.wav");
    write_raw(&pcm24, 1, 24, false, &[1, 2]);
    assert!(matches!(read_wav(&pcm24), Err(Error::WavUnsupported { .. })));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF\x04\x00\x00\x00WAVEnope").unwrap();
    assert!(matches!(read_wav(&junk), Err(Error::WavMalformed { .. })));

    assert!(matches!(read_wav(&dir.path().join("absent.wav")), Err(Error::Io(_))));
}

#[test]
fn manifest_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let classes: Vec<String> = ["angry", "calm"].iter().map(|s| s.to_string()).collect();
    write_wav(&dir.path().join("a.wav"), &[0.5, -0.5, 0.25], 8000).unwrap();
    write_wav(&dir.path().join("b.wav"), &[0.1; 4], 8000).unwrap();
    let manifest = dir.path().join("manifest.tsv");
    std::fs::write(&manifest, "# path\tlabel\tspeaker\na.wav\tcalm\tspk1\n\nb.wav\tangry\tspk2\n").unwrap();
    let clips = ingest_manifest(&manifest, &classes).unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!((clips[0].label, clips[0].speaker.as_str()), (1, "spk1"));
    assert_eq!(clips[1].label, 0);

    let rows = read_manifest(&manifest, &classes).unwrap();
    let stray = dir.path().join("c.wav");
    write_wav(&stray, &[0.0; 3], 8000).unwrap();
    assert!(matches!(ingest_wav(&stray, &rows), Err(Error::MissingManifestRow(_))));

    let bad_label = dir.path().join("bad.tsv");
    std::fs::write(&bad_label, "a.wav\tsad\tspk1\n").unwrap();
    assert!(matches!(read_manifest(&bad_label, &classes), Err(Error::Config(_))));
    let bad_fields = dir.path().join("fields.tsv");
    std::fs::write(&bad_fields, "a.wav calm spk1\n").unwrap();
    assert!(matches!(read_manifest(&bad_fields, &classes), Err(Error::Config(_))));
}

#[test]
fn corpus_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&small()).unwrap();
    let path = dir.path().join("corpus.bin");
    save_corpus(&path, &corpus).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_corpus(&path).is_err());
}

#[test]
fn batching_is_seeded_and_complete() {
    let corpus = synth_corpus(&small()).unwrap();
    let b = Batcher::new(&corpus, 16).unwrap();
    assert_eq!(b.num_batches(), corpus.len().div_ceil(16));
    let order = b.order(1, 0);
    assert_eq!(order, b.order(1, 0));
    assert_ne!(order, b.order(1, 1));
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..corpus.len()).collect::<Vec<_>>());
    let batches = b.epoch::<f32>(1, 0).unwrap();
    assert_eq!(batches.iter().map(|x| x.labels.len()).sum::<usize>(), corpus.len());
    assert_eq!(batches[0].wave.shape(), &[16, 48]);
    assert!(matches!(Batcher::new(&corpus, 0), Err(Error::Config(_))));
    assert!(matches!(Batcher::new(&[], 4), Err(Error::EmptyDataset)));
    assert_eq!(fit_length(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0]);
    assert_eq!(fit_length(&[1.0], 3), vec![1.0, 0.0, 0.0]);
}
