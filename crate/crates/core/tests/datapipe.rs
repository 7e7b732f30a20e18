mod common;

use common::fixtures::{designed_manifest_records, oracle_reason as oracle, random_records, DESIGNED_TALLY};
use proptest::prelude::*;
use ysnd_core::datapipe::*;
use ysnd_core::metrics::EvalConfig;
use ysnd_core::tensor::Tensor;
use ysnd_core::Error;

fn rec(id: &str, duration: f64, events: &[(&str, f64, f64)]) -> ClipRecord {
    ClipRecord {
        clip_id: id.into(),
        duration,
        events: events
            .iter()
            .map(|&(l, s, e)| Event {
                label: l.into(),
                t_start: s,
                t_end: e,
            })
            .collect(),
        av_align_score: Some(0.9),
        semantic_score: Some(0.9),
        speech_flag: false,
        bgm_flag: false,
    }
}

#[test]
fn record_line_round_trip() {
    let mut r = rec("a b", 3.5, &[("dog bark", 0.25, 1.0), ("car", 1.5, 3.5)]);
    r.semantic_score = None;
    r.bgm_flag = true;
    let line = r.to_string();
    assert_eq!(line, "a b\t3.5\tdog bark:0.25:1;car:1.5:3.5\t0.9\t-\t0\t1");
    assert_eq!(line.parse::<ClipRecord>().unwrap(), r);
    let bad = rec("x", 1.0, &[("e", 0.5, 1.5)]);
    assert!(bad.validate().is_err());
    assert!(bad.to_string().parse::<ClipRecord>().is_err());
}

#[test]
fn alignment_scoring() {
    let cfg = EvalConfig::default();
    let r = rec("c", 2.0, &[("e", 0.0, 2.0)]);
    let mut env = vec![0.0; 20];
    for (k, &p) in [3usize, 8, 14, 18].iter().enumerate() {
        env[p] = 1.0 + k as f64 * 0.1;
    }
    let s = score_alignment(&r, Some(&env), Some(&env), &cfg).unwrap();
    assert_eq!(s.av_align_score, Some(1.0));
    let silent = vec![0.0; 20];
    let s = score_alignment(&r, Some(&silent), Some(&env), &cfg).unwrap();
    assert_eq!(s.av_align_score, Some(0.0));
    // audio keeps 3 of the 4 video peaks
    let mut three = env.clone();
    three[18] = 0.0;
    let s = score_alignment(&r, Some(&three), Some(&env), &cfg).unwrap();
    assert_eq!(s.av_align_score, Some(0.75));
    let s = score_alignment(&r, None, Some(&env), &cfg).unwrap();
    assert_eq!(s.av_align_score, None);
    assert!(score_alignment(&r, Some(&env[..10]), Some(&env), &cfg).is_err());
}

#[test]
fn filter_basic_rules() {
    let mut recs = random_records(30, 1);
    for r in &mut recs {
        r.av_align_score.get_or_insert(0.5);
        r.semantic_score.get_or_insert(0.5);
    }
    let out = filter(&recs, &FilterPolicy::permissive()).unwrap();
    assert_eq!(out.kept.len(), 30);
    let mut low = rec("low", 1.0, &[("e", 0.0, 1.0)]);
    low.av_align_score = Some(0.1);
    let out = filter(&[low], &FilterPolicy::default()).unwrap();
    assert_eq!(out.dropped[0].1, DropReason::Alignment);
    let bad = FilterPolicy {
        min_av_align: 1.5,
        ..FilterPolicy::default()
    };
    assert!(matches!(filter(&[], &bad), Err(Error::Config(_))));
}

#[test]
fn filter_matches_predicate_oracle() {
    let recs = random_records(100, 7);
    let policy = FilterPolicy::default();
    let out = filter(&recs, &policy).unwrap();
    let expect_kept: Vec<&ClipRecord> = recs.iter().filter(|r| oracle(r, &policy).is_none()).collect();
    assert_eq!(out.kept.iter().collect::<Vec<_>>(), expect_kept);
    for (r, why) in &out.dropped {
        assert_eq!(Some(why.as_str()), oracle(r, &policy));
    }
    assert_eq!(out.kept.len() + out.dropped.len(), recs.len());
}

proptest! {
    #[test]
    fn raising_thresholds_never_grows_kept(seed in 0u64..500, a in 0.0f64..1.0, b in 0.0f64..1.0, da in 0.0f64..0.5, db in 0.0f64..0.5) {
        let recs = random_records(40, seed);
        let lo = FilterPolicy { min_av_align: a * 0.5, min_semantic: b * 0.5, ..FilterPolicy::default() };
        let hi = FilterPolicy { min_av_align: a * 0.5 + da, min_semantic: b * 0.5 + db, ..lo };
        let kl: Vec<String> = filter(&recs, &lo).unwrap().kept.into_iter().map(|r| r.clip_id).collect();
        let kh = filter(&recs, &hi).unwrap().kept;
        prop_assert!(kh.iter().all(|r| kl.contains(&r.clip_id)));
    }
}

#[test]
fn cut_full_span_is_identity() {
    let r = rec("full", 2.0, &[("e", 0.0, 2.0)]);
    let feats = Tensor::from_fn(&[20, 3], |i| i as f64);
    let segs = cut(&r, &feats, 10.0).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].0, r);
    assert_eq!(segs[0].1, feats);
}

#[test]
fn cut_adjacent_events_partition_rows() {
    let r = rec("p", 2.0, &[("b", 1.0, 2.0), ("a", 0.0, 1.0)]);
    let feats = Tensor::from_fn(&[20, 2], |i| (i / 2) as f64);
    let segs = cut(&r, &feats, 10.0).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[0].0.clip_id, "p#0");
    assert_eq!(segs[0].0.events[0].label, "a");
    let rows = |t: &Tensor<f64>| (0..t.rows()).map(|i| t.row(i)[0] as usize).collect::<Vec<_>>();
    assert_eq!(rows(&segs[0].1), (0..10).collect::<Vec<_>>());
    assert_eq!(rows(&segs[1].1), (10..20).collect::<Vec<_>>());
}

#[test]
fn cut_three_events_in_time_order() {
    let r = rec("t", 3.0, &[("z", 2.2, 2.9), ("x", 0.1, 0.3), ("y", 1.0, 1.7)]);
    let segs = cut_record(&r).unwrap();
    let ids: Vec<&str> = segs.iter().map(|s| s.clip_id.as_str()).collect();
    assert_eq!(ids, ["t#0", "t#1", "t#2"]);
    let labels: Vec<&str> = segs.iter().map(|s| s.events[0].label.as_str()).collect();
    assert_eq!(labels, ["x", "y", "z"]);
    for (s, e) in segs.iter().zip([(0.1, 0.3), (1.0, 1.7), (2.2, 2.9)]) {
        assert!((s.duration - (e.1 - e.0)).abs() < 1e-12);
        assert!(s.duration <= r.duration);
        assert_eq!(s.events[0].t_start, 0.0);
    }
    let feats = Tensor::from_fn(&[30, 1], |i| i as f64);
    let cut3 = cut(&r, &feats, 10.0).unwrap();
    assert_eq!(cut3[0].1.data(), &[1.0, 2.0]);
    assert_eq!(cut3[1].1.data(), &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0]);
}

#[test]
fn cut_rejects_event_past_duration() {
    let r = rec("bad", 1.0, &[("ok", 0.0, 0.5), ("late", 0.5, 1.2)]);
    let msg = cut_record(&r).unwrap_err().to_string();
    assert!(msg.contains("late"), "{msg}");
    let ok = rec("short", 2.0, &[("a", 0.0, 1.0), ("b", 1.0, 2.0)]);
    let msg = cut(&ok, &Tensor::zeros(&[15, 1]), 10.0).unwrap_err().to_string();
    assert!(msg.contains('b'), "{msg}");
}

#[test]
fn pipeline_empty_manifest() {
    let cfg = EvalConfig::default();
    for text in ["", "#ysnd-manifest v1\n"] {
        let out = run_pipeline(text, &FilterPolicy::default(), &NoEnvelopes, &cfg).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.report.dropped(), 0);
        assert_eq!(out.report.counts.len(), DropReason::ALL.len());
    }
    assert!(run_pipeline("id\t1\t\t-\t-\t0\t0\n", &FilterPolicy::default(), &NoEnvelopes, &cfg).is_err());
}

#[test]
fn pipeline_designed_fixture() {
    let cfg = EvalConfig::default();
    let recs = designed_manifest_records();
    let text = write_manifest(&recs);
    let out = run_pipeline(&text, &FilterPolicy::default(), &NoEnvelopes, &cfg).unwrap();
    let [un, al, se, sp, bg, kept] = DESIGNED_TALLY;
    let r = &out.report;
    assert_eq!(
        [
            r.count(DropReason::Unscored),
            r.count(DropReason::Alignment),
            r.count(DropReason::Semantic),
            r.count(DropReason::Speech),
            r.count(DropReason::Bgm),
            r.kept
        ],
        [un, al, se, sp, bg, kept]
    );
    assert_eq!(r.kept + r.dropped(), 50);
    assert_eq!(r.input, 50);
    for (id, why) in &out.dropped {
        let rec = recs.iter().find(|x| &x.clip_id == id).unwrap();
        assert_eq!(Some(why.as_str()), oracle(rec, &FilterPolicy::default()));
    }
    assert!(r.to_csv().starts_with("unscored,5\nalignment,10\nsemantic,5\nspeech,5\nbgm,5\nmalformed,0\n"));

    let again = run_pipeline(&out.manifest(), &FilterPolicy::default(), &NoEnvelopes, &cfg).unwrap();
    assert_eq!(again.manifest(), out.manifest());
    assert_eq!(again.report.dropped(), 0);
}

#[test]
fn pipeline_reports_malformed_lines_and_continues() {
    let cfg = EvalConfig::default();
    let good = rec("g", 1.0, &[("e", 0.0, 1.0)]);
    let text = format!(
        "{MANIFEST_HEADER}\n{good}\nnot a record\n# comment\ng2\t1\te:0:2\t0.5\t0.5\t0\t0\n{good}\n"
    );
    let out = run_pipeline(&text, &FilterPolicy::default(), &NoEnvelopes, &cfg).unwrap();
    assert_eq!(out.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![3, 5]);
    assert_eq!(out.report.count(DropReason::Malformed), 2);
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.report.input, 4);
}

struct Envs;

impl EnvelopeSource for Envs {
    fn envelopes(&self, id: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut v = vec![0.0; 20];
        v[5] = 1.0;
        v[15] = 0.8;
        match id {
            "same" => Some((v.clone(), v)),
            "off" => {
                let mut a = vec![0.0; 20];
                a[10] = 1.0;
                Some((a, v))
            }
            _ => None,
        }
    }
}

#[test]
fn pipeline_scores_from_envelopes() {
    let cfg = EvalConfig::default();
    let mut recs = Vec::new();
    for id in ["same", "off", "none"] {
        let mut r = rec(id, 2.0, &[("e", 0.0, 2.0)]);
        r.av_align_score = None;
        recs.push(r);
    }
    let out = run_pipeline(&write_manifest(&recs), &FilterPolicy::default(), &Envs, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].clip_id, "same");
    assert_eq!(out.records[0].av_align_score, Some(1.0));
    assert_eq!(out.dropped, vec![("off".into(), DropReason::Alignment), ("none".into(), DropReason::Unscored)]);
}
