use audiolm::audio::FrontendConfig;
use audiolm::encoder::EncoderConfig;
use audiolm::fusion::{FusionConfig, PoolConfig};
use audiolm::lm::{AudioRef, AudioStore, DecoderConfig, InterleavedSample, Segment, Slot};
use audiolm::model::{argmax, AudioLm, ModelConfig};
use audiolm::synth::{AudioSpec, ToneEvent, Waveform};
use audiolm::tokenizer::{AUDIO_END, AUDIO_START, EOS, PAD};
use audiolm::Error;
use ndarray::s;

fn tone_spec(id: &str, seconds: f64, hz: f64) -> AudioSpec {
    AudioSpec {
        id: id.into(),
        duration: seconds,
        events: vec![ToneEvent {
            onset: 0.0,
            offset: seconds,
            freqs: vec![hz],
            waveform: Waveform::Sine,
            amplitude: 1.0,
        }],
    }
}

fn audio(id: &str, seconds: f64, hz: f64) -> Segment {
    Segment::Audio(AudioRef::Spec { spec: tone_spec(id, seconds, hz) })
}

/// Full-rate frontend (50 frames/s, 30 s chunks, stride-5 pooling) in front
/// of small trainable modules.
fn full_rate() -> ModelConfig {
    ModelConfig {
        frontend: FrontendConfig { frame_rate: 50, num_bands: 16, chunk_seconds: 30.0, max_seconds: 390.0 },
        encoder: EncoderConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 1,
            ff_dim: 8,
            input_dim: 16,
            max_frames: 1500,
        },
        fusion: FusionConfig { tap_indices: vec![0, 1] },
        pool: PoolConfig::default(),
        connector_expansion: 2,
        decoder: DecoderConfig { num_layers: 1, model_dim: 8, num_heads: 1, ff_dim: 16, max_positions: 4000 },
    }
}

#[test]
fn thirty_second_clip_with_prompt_and_target() {
    let (model, _) = AudioLm::init(&full_rate(), 0).unwrap();
    let sample =
        InterleavedSample::new(vec![audio("a", 30.0, 440.0), Segment::Text("0123456789".into())], "ABCDE", 390.0);
    let a = model.assemble(&sample, &AudioStore::new(8000)).unwrap();
    assert_eq!(a.len(), 2 + 300 + 10 + 5 + 1);
    assert_eq!(a.target_count(), 6);
    assert_eq!(a.slots[0], Slot::Token(AUDIO_START));
    assert_eq!(a.slots[301], Slot::Token(AUDIO_END));
    assert_eq!(*a.labels.last().unwrap(), EOS);
    // audio positions never carry labels or loss
    for t in 1..301 {
        assert!(matches!(a.slots[t], Slot::Audio { segment: 0, .. }));
        assert_eq!(a.labels[t], PAD);
        assert!(!a.loss_mask[t]);
    }
    assert!(a.loss_mask[312..].iter().all(|&m| m));
    assert!(a.loss_mask[..312].iter().all(|&m| !m));
}

#[test]
fn text_only_sample_is_plain_lm_example() {
    let (model, ps) = AudioLm::init(&ModelConfig::tiny(), 0).unwrap();
    let sample = InterleavedSample::new(vec![Segment::Text("abc".into())], "de", 10.0);
    let a = model.assemble(&sample, &AudioStore::new(8000)).unwrap();
    assert!(a.audio.is_empty());
    assert_eq!(a.len(), 6);
    assert_eq!(a.target_count(), 3);
    assert!(model.lm_loss(&ps, &[a]).unwrap().is_finite());
}

#[test]
fn audio_blocks_keep_segment_order() {
    let (model, _) = AudioLm::init(&ModelConfig::tiny(), 0).unwrap();
    let sample = InterleavedSample::new(
        vec![audio("first", 2.0, 300.0), Segment::Text("x".into()), audio("second", 4.0, 600.0)],
        "y",
        10.0,
    );
    let a = model.assemble(&sample, &AudioStore::new(8000)).unwrap();
    // 2 s → one chunk of 4 tokens, 4 s → two chunks
    let segs: Vec<usize> = a
        .slots
        .iter()
        .filter_map(|s| if let Slot::Audio { segment, .. } = s { Some(*segment) } else { None })
        .collect();
    assert_eq!(segs, [vec![0; 4], vec![1; 8]].concat());
    assert_eq!(a.len(), (1 + 4 + 1) + 1 + (1 + 8 + 1) + 2);
}

#[test]
fn context_overflow_names_limit() {
    let mut cfg = ModelConfig::tiny();
    cfg.decoder.max_positions = 30;
    let (model, _) = AudioLm::init(&cfg, 0).unwrap();
    let sample = InterleavedSample::new(vec![Segment::Text("x".repeat(40))], "y", 10.0);
    let err = model.assemble(&sample, &AudioStore::new(8000)).unwrap_err();
    assert!(matches!(err, Error::ContextOverflow { limit: 30, .. }));
    assert!(err.to_string().contains("30"));
}

#[test]
fn over_cap_audio_is_a_data_contract_error() {
    let (model, _) = AudioLm::init(&ModelConfig::tiny(), 0).unwrap();
    let sample = InterleavedSample::new(vec![audio("long", 6.0, 300.0)], "y", 4.0);
    let err = model.assemble(&sample, &AudioStore::new(8000)).unwrap_err();
    assert!(matches!(&err, Error::DataContract { sample, .. } if sample == "long"));
}

#[test]
fn empty_target_is_rejected_for_training() {
    let (model, _) = AudioLm::init(&ModelConfig::tiny(), 0).unwrap();
    let sample = InterleavedSample::new(vec![Segment::Text("x".into())], "", 10.0);
    assert!(matches!(model.assemble(&sample, &AudioStore::new(8000)), Err(Error::EmptyTarget)));
}

#[test]
fn decoder_is_causal() {
    let (model, ps) = AudioLm::init(&ModelConfig::tiny(), 3).unwrap();
    let sample = InterleavedSample::new(vec![audio("a", 2.0, 440.0), Segment::Text("abcdef".into())], "gh", 10.0);
    let a = model.assemble(&sample, &AudioStore::new(8000)).unwrap();
    let audio_blocks = model.audio_embeddings(&ps, &a).unwrap();
    let x = model.decoder.embed(&ps, &a.slots, &audio_blocks).unwrap();
    let rows: Vec<usize> = (0..a.len()).collect();
    let (base, _) = model.decoder.forward(&ps, x.clone(), &rows);
    for t in [0, 3, 7, a.len() - 2] {
        let mut y = x.clone();
        y.slice_mut(s![t + 1.., ..]).mapv_inplace(|v| v * -3.0 + 1.0);
        let (pert, _) = model.decoder.forward(&ps, y, &rows);
        assert_eq!(base.slice(s![..=t, ..]), pert.slice(s![..=t, ..]), "position {t}");
        assert_ne!(base.row(t + 1), pert.row(t + 1));
    }
}

#[test]
fn audio_content_does_not_move_loss_mask() {
    let (model, _) = AudioLm::init(&ModelConfig::tiny(), 0).unwrap();
    let store = AudioStore::new(8000);
    let mk = |hz| InterleavedSample::new(vec![audio("a", 3.0, hz), Segment::Text("q".into())], "ans", 10.0);
    let a = model.assemble(&mk(220.0), &store).unwrap();
    let b = model.assemble(&mk(880.0), &store).unwrap();
    assert_ne!(a.audio[0][0].frames, b.audio[0][0].frames);
    assert_eq!(a.loss_mask, b.loss_mask);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.slots, b.slots);
}

#[test]
fn greedy_generation_follows_argmax_of_logits() {
    let (model, ps) = AudioLm::init(&ModelConfig::tiny(), 9).unwrap();
    let store = AudioStore::new(8000);
    let sample = InterleavedSample::new(vec![audio("a", 2.0, 500.0), Segment::Text("name it".into())], "", 10.0);
    let prompt = model.assemble_prompt(&sample, &store).unwrap();
    let ids = model.generate_ids(&ps, &prompt, 8, 0.0, 0).unwrap();
    let mut manual = prompt.clone();
    let mut expected = Vec::new();
    for _ in 0..8 {
        let logits = model.logits(&ps, &manual).unwrap();
        let next = argmax(logits.row(manual.len() - 1).iter().copied()) as u32;
        if next == EOS {
            break;
        }
        expected.push(next);
        manual.slots.push(Slot::Token(next));
        manual.labels.push(next);
        manual.loss_mask.push(false);
    }
    assert_eq!(ids, expected);
    let text = model.generate(&ps, &sample, &store, 8, 0.0, 0).unwrap();
    assert_eq!(text, model.generate(&ps, &sample, &store, 8, 0.0, 0).unwrap());
    assert_eq!(model.generate(&ps, &sample, &store, 0, 0.0, 0).unwrap(), "");
    assert!(model.generate(&ps, &sample, &store, 4, -1.0, 0).is_err());
}

#[test]
fn sampling_is_seeded() {
    let (model, ps) = AudioLm::init(&ModelConfig::tiny(), 9).unwrap();
    let store = AudioStore::new(8000);
    let sample = InterleavedSample::new(vec![Segment::Text("go".into())], "", 10.0);
    let a = model.generate(&ps, &sample, &store, 12, 1.5, 4).unwrap();
    assert_eq!(a, model.generate(&ps, &sample, &store, 12, 1.5, 4).unwrap());
}

#[test]
fn generation_overflow_is_an_error() {
    let mut cfg = ModelConfig::tiny();
    cfg.decoder.max_positions = 26;
    let (model, ps) = AudioLm::init(&cfg, 0).unwrap();
    // the prompt fills the context, so the first generated token overflows it
    let sample = InterleavedSample::new(vec![Segment::Text("x".repeat(26))], "", 10.0);
    let err = model.generate(&ps, &sample, &AudioStore::new(8000), 16, 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::ContextOverflow { limit: 26, .. }));
}
