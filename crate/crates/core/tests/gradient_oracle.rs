//! End-to-end analytic gradients against central finite differences.

use audiolm::lm::{AudioRef, AudioStore, InterleavedSample, Segment};
use audiolm::model::{Assembled, AudioLm, ModelConfig, Trainable};
use audiolm::synth::{AudioSpec, ToneEvent, Waveform};
use audiolm::{ModuleGroup, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale.
const FLOOR: f64 = 1e-6;

fn sample() -> InterleavedSample {
    let spec = AudioSpec {
        id: "tone".into(),
        duration: 3.0,
        events: vec![
            ToneEvent { onset: 0.2, offset: 1.4, freqs: vec![440.0], waveform: Waveform::Square, amplitude: 0.8 },
            ToneEvent { onset: 1.6, offset: 2.9, freqs: vec![330.0, 660.0], waveform: Waveform::Sine, amplitude: 0.6 },
        ],
    };
    InterleavedSample::new(
        vec![Segment::Text("hear ".into()), Segment::Audio(AudioRef::Spec { spec }), Segment::Text(" pitch?".into())],
        "A4 E4",
        10.0,
    )
}

fn mean_loss(model: &AudioLm, ps: &ParamSet, a: &Assembled) -> f64 {
    let (sum, n) = model.loss_sum(ps, a).unwrap();
    sum / n as f64
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let (model, mut ps) = AudioLm::init(&cfg, 5).unwrap();
    let a = model.assemble(&sample(), &AudioStore::new(8000)).unwrap();
    assert_eq!(a.audio[0].len(), 2, "3 s of audio spans two 2 s chunks");
    let mut g = ps.zeros_like();
    let (_, count) = model.accumulate_grad(&ps, &a, 1.0, Trainable::ALL, &mut g).unwrap();
    g.scale(1.0 / count as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let total = ps.num_scalars();
    let mut checked = 0;
    let mut nonzero = 0;
    let mut per_group = [0usize; 3];
    let mut worst = 0.0f64;
    while checked < 240 {
        let (id, off) = ps.locate(rng.gen_range(0..total));
        let analytic = g.scalar(id, off);
        let group = ps.get(id).group;
        let name = ps.get(id).name.clone();
        let orig = *ps.scalar_mut(id, off);
        *ps.scalar_mut(id, off) = orig + STEP;
        let up = mean_loss(&model, &ps, &a);
        *ps.scalar_mut(id, off) = orig - STEP;
        let down = mean_loss(&model, &ps, &a);
        *ps.scalar_mut(id, off) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(analytic, numeric);
        assert!(err <= REL_TOL, "{name}[{off}]: analytic {analytic:e} numeric {numeric:e} rel {err:e}");
        worst = worst.max(err);
        checked += 1;
        if analytic.abs() > FLOOR {
            nonzero += 1;
        }
        per_group[ModuleGroup::ALL.iter().position(|&x| x == group).unwrap()] += 1;
    }
    assert!(per_group.iter().all(|&n| n > 0), "every module sampled: {per_group:?}");
    assert!(nonzero >= 100, "only {nonzero} sampled gradients were non-trivial");
    eprintln!("checked {checked} scalars ({nonzero} non-trivial), worst relative error {worst:e}");
}

#[test]
fn frozen_modules_still_pass_gradient_through() {
    let cfg = ModelConfig::tiny();
    let (model, ps) = AudioLm::init(&cfg, 2).unwrap();
    let a = model.assemble(&sample(), &AudioStore::new(8000)).unwrap();
    let mut full = ps.zeros_like();
    model.accumulate_grad(&ps, &a, 1.0, Trainable::ALL, &mut full).unwrap();
    let mut warm = ps.zeros_like();
    let only_connector = Trainable { encoder: false, connector: true, lm: false };
    model.accumulate_grad(&ps, &a, 1.0, only_connector, &mut warm).unwrap();
    for (t, (f, w)) in ps.tensors().iter().zip(full.data.iter().zip(&warm.data)) {
        match t.group {
            ModuleGroup::FusionConnector => assert_eq!(f, w, "{}", t.name),
            ModuleGroup::Encoder => assert!(w.iter().all(|&x| x == 0.0), "{}", t.name),
            ModuleGroup::Lm => {}
        }
    }
}
