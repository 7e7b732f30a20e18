//! Constructed manifests with known drop tallies.

use ysnd_core::datapipe::{ClipRecord, Event};
use ysnd_core::SeededRng;

/// Record `i` of the designed 50-record fixture. By `i % 10`:
/// 0 unscored, 1 low alignment, 2 low semantic, 3 speech, 4 bgm,
/// 5 low alignment and speech, 6..=9 clean.
pub fn designed_record(i: usize, rng: &mut SeededRng) -> ClipRecord {
    let duration = 2.0 + (i % 3) as f64;
    let n_events = 1 + i % 3;
    let span = duration / n_events as f64;
    let events = (0..n_events)
        .map(|k| Event {
            label: format!("ev{}", (i + k) % 5),
            t_start: k as f64 * span + 0.1 * rng.uniform(),
            t_end: (k + 1) as f64 * span - 0.1 * rng.uniform(),
        })
        .collect();
    let good = |rng: &mut SeededRng| 0.5 + 0.5 * rng.uniform();
    let mut r = ClipRecord {
        clip_id: format!("clip{i:03}"),
        duration,
        events,
        av_align_score: Some(good(rng)),
        semantic_score: Some(good(rng)),
        speech_flag: false,
        bgm_flag: false,
    };
    match i % 10 {
        0 => r.av_align_score = None,
        1 => r.av_align_score = Some(0.1),
        2 => r.semantic_score = Some(0.1),
        3 => r.speech_flag = true,
        4 => r.bgm_flag = true,
        5 => {
            r.av_align_score = Some(0.05);
            r.speech_flag = true;
        }
        _ => {}
    }
    r
}

pub fn designed_manifest_records() -> Vec<ClipRecord> {
    let mut rng = SeededRng::new(50);
    (0..50).map(|i| designed_record(i, &mut rng)).collect()
}

/// `(unscored, alignment, semantic, speech, bgm, kept)` for the fixture
/// under the default policy, tallied by hand from the design.
pub const DESIGNED_TALLY: [usize; 6] = [5, 10, 5, 5, 5, 20];

/// Random records for predicate-oracle checks.
pub fn random_records(n: usize, seed: u64) -> Vec<ClipRecord> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let score = |rng: &mut SeededRng| if rng.bernoulli(0.1) { None } else { Some(rng.uniform()) };
            ClipRecord {
                clip_id: format!("r{i}"),
                duration: 1.0,
                events: vec![Event {
                    label: "x".into(),
                    t_start: 0.0,
                    t_end: 1.0,
                }],
                av_align_score: score(&mut rng),
                semantic_score: score(&mut rng),
                speech_flag: rng.bernoulli(0.2),
                bgm_flag: rng.bernoulli(0.2),
            }
        })
        .collect()
}

/// Independent statement of the keep rule: first failing check, in the
/// order unscored, alignment, semantic, speech, bgm.
pub fn oracle_reason(r: &ClipRecord, p: &ysnd_core::datapipe::FilterPolicy) -> Option<&'static str> {
    let (Some(av), Some(sem)) = (r.av_align_score, r.semantic_score) else {
        return Some("unscored");
    };
    let checks = [
        ("alignment", av >= p.min_av_align),
        ("semantic", sem >= p.min_semantic),
        ("speech", !(p.drop_speech && r.speech_flag)),
        ("bgm", !(p.drop_bgm && r.bgm_flag)),
    ];
    checks.iter().find(|(_, ok)| !ok).map(|(n, _)| *n)
}
