//! Timing-order checks; kept in their own binary so no other test competes
//! for the CPU while they run.

use kfgen::backbone::{Backbone, BackboneConfig};
use kfgen::interpnet::{InterpConfig, InterpNet};
use kfgen::moe::MoeConfig;
use kfgen::streamer::{start_session, StreamConfig};

fn audio(frames: usize) -> Vec<usize> {
    (0..frames * 5 / 3).map(|i| (i * 37 + 11) % 500).collect()
}

#[test]
fn interpolation_cheaper_than_decode_attention() {
    let m = Backbone::<f32>::new(
        BackboneConfig {
            moe: Some(MoeConfig::default()),
            ..BackboneConfig::default()
        },
        4,
    )
    .unwrap();
    let net = InterpNet::<f32>::new(InterpConfig::default(), 9).unwrap();
    let prefill: [Vec<usize>; 4] = std::array::from_fn(|q| (0..10).map(|i| (i * 13 + q * 40) % 256).collect());
    let a = audio(120);
    let (_, report) = start_session(&m, Some(&net), &a, Some(prefill), StreamConfig { origin: -60, ..StreamConfig::default() })
        .unwrap()
        .run_to_end()
        .unwrap();
    for p in &report.profiles {
        assert!(p.interpolation < p.decode_attention, "{p:?}");
    }
}
