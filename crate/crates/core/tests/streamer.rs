use kfgen::backbone::{Backbone, BackboneConfig, Sampling};
use kfgen::interpnet::{InterpConfig, InterpNet};
use kfgen::keyframe::PAD_ID;
use kfgen::moe::MoeConfig;
use kfgen::streamer::{
    compare_strides, expected_decoder_steps, prefill_from_dense, start_session, StepProfile, StreamConfig, StrideRun,
};

fn backbone() -> Backbone<f32> {
    let cfg = BackboneConfig {
        moe: Some(MoeConfig::default()),
        ..BackboneConfig::default()
    };
    Backbone::new(cfg, 4).unwrap()
}

fn small_backbone() -> Backbone<f32> {
    let cfg = BackboneConfig {
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ..BackboneConfig::default()
    };
    Backbone::new(cfg, 4).unwrap()
}

fn interp() -> InterpNet<f32> {
    InterpNet::new(InterpConfig::default(), 9).unwrap()
}

fn audio(frames: usize) -> Vec<usize> {
    // 5 audio tokens per 3 motion frames.
    (0..frames * 5 / 3).map(|i| (i * 37 + 11) % 500).collect()
}

fn prefill(p: usize) -> [Vec<usize>; 4] {
    std::array::from_fn(|q| (0..p).map(|i| (i * 13 + q * 40) % 256).collect())
}

#[test]
fn prefill_must_hold_p_keyframes() {
    let m = small_backbone();
    let a = audio(180);
    let err = start_session(&m, None, &a, Some(prefill(9)), StreamConfig::default()).err().unwrap();
    assert!(err.to_string().contains("expected P = 10"), "{err}");
    let s = start_session(&m, None, &a, Some(prefill(10)), StreamConfig::default()).unwrap();
    assert_eq!(s.buffer.cursor(), 10);
    assert_eq!(s.buffer.dense_len(), 0);
    assert_eq!(s.remaining(), 20);
}

#[test]
fn session_of_120_frames() {
    let m = backbone();
    let net = interp();
    let a = audio(180);
    let mut s = start_session(&m, Some(&net), &a, Some(prefill(10)), StreamConfig::default()).unwrap();
    let mut hashes = Vec::new();
    while let Some(r) = s.step().unwrap() {
        assert_eq!(r.profile.decoder_steps, 5);
        assert_eq!(r.dense[0].len(), 30);
        assert!(r.audio_read.unwrap() < r.audio_limit);
        assert!(r.profile.total >= r.profile.stage_sum());
        hashes.push(s.buffer.head());
    }
    let (buf, report) = s.run_to_end().unwrap();
    assert_eq!(report.decoder_steps, 20);
    assert_eq!(report.decoder_steps, expected_decoder_steps(20, 5));
    assert_eq!(report.frames, 120);
    assert!(report.fps > 0.0);
    assert_eq!(report.ttff_ms, report.profiles[0].total);
    assert_eq!(buf.verify(), Ok(()));
    assert_eq!(buf.commits().iter().map(|c| c.hash).collect::<Vec<_>>(), hashes);

    // Gap-free tiling; anchors inside the dense output are the keyframes.
    let mut next = 9 * 6 + 1;
    for c in buf.commits() {
        assert_eq!(c.first_frame, next);
        next += c.dense[0].len();
    }
    for q in 0..4 {
        let kf = buf.keyframes(q);
        let dense = buf.dense(q);
        for (j, &tok) in dense.iter().enumerate() {
            let frame = 55 + j;
            if frame % 6 == 0 {
                assert_eq!(tok, kf[frame / 6]);
            }
        }
    }
    let table = report.table();
    for stage in StepProfile::STAGES {
        assert!(table.contains(stage));
    }
}

#[test]
fn future_audio_does_not_change_past_chunks() {
    let m = small_backbone();
    let a = audio(180);
    let cfg = StreamConfig::default();
    let mut s = start_session(&m, None, &a, Some(prefill(10)), cfg).unwrap();
    let first = s.step().unwrap().unwrap();
    let mut b = a.clone();
    for t in &mut b[first.audio_limit..] {
        *t = (*t + 250) % 500;
    }
    let mut s2 = start_session(&m, None, &b, Some(prefill(10)), cfg).unwrap();
    let again = s2.step().unwrap().unwrap();
    assert_eq!(first.keyframes, again.keyframes);
    assert_eq!(first.dense, again.dense);
    assert_eq!(s.buffer.head(), s2.buffer.head());
    let second = s.step().unwrap().unwrap();
    assert!(second.audio_read.unwrap() < second.audio_limit);
    assert!(second.audio_read.unwrap() >= first.audio_limit);
}

#[test]
fn sessions_are_deterministic() {
    let m = small_backbone();
    let a = audio(150);
    let run = |sampling| {
        let cfg = StreamConfig {
            sampling,
            ..StreamConfig::default()
        };
        start_session(&m, None, &a, None, cfg).unwrap().run_to_end().unwrap().0
    };
    assert_eq!(run(Sampling::Greedy), run(Sampling::Greedy));
    let hot = Sampling::Temperature { tau: 1.0, seed: 3 };
    assert_eq!(run(hot), run(hot));
    assert_ne!(run(hot).head(), run(Sampling::Temperature { tau: 1.0, seed: 4 }).head());
}

#[test]
fn no_prefill_starts_from_padding() {
    let m = small_backbone();
    let a = audio(60);
    let mut s = start_session(&m, None, &a, None, StreamConfig::default()).unwrap();
    assert_eq!(s.buffer.history()[0], vec![PAD_ID; 10]);
    let r = s.step().unwrap().unwrap();
    assert_eq!(r.first_frame, 0);
    assert_eq!(r.dense[0].len(), 4 * 6 + 1);
    assert_eq!(s.buffer.history()[2][5..], r.keyframes[2][..]);
    let r = s.step().unwrap().unwrap();
    assert_eq!(r.first_frame, 25);
    assert!(s.step().unwrap().is_none());
}

#[test]
fn stride_scaling() {
    let m = small_backbone();
    let a = audio(120);
    let dense: [Vec<usize>; 4] = std::array::from_fn(|q| (0..100).map(|i| (i + q) % 256).collect());
    let runs: Vec<StrideRun<'_, f32>> = [1, 4, 6, 8]
        .into_iter()
        .map(|stride| StrideRun {
            stride,
            n: 5,
            model: &m,
            interp: None,
        })
        .collect();
    let rows = compare_strides(&runs, &a, Some(&dense), 10).unwrap();
    assert_eq!(rows[0].decoder_steps, 120);
    assert_eq!(rows[1].decoder_steps, 30);
    assert_eq!(rows[2].decoder_steps, 20);
    assert_eq!(rows[3].decoder_steps, 15);
    assert!(rows.iter().all(|r| r.frames == 120));
    assert!((rows[2].step_ratio_vs_dense - 1.0 / 6.0).abs() < 1e-12);
    assert!(prefill_from_dense(&dense, 10, 12).is_err());
}
