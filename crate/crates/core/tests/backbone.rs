use kfgen::backbone::{
    pack_template, vocab, Backbone, BackboneConfig, ChunkWindow, DecToken, EncInput, FwdCtx, Sampling,
};
use kfgen::moe::MoeConfig;
use kfgen_tensor::{Checkpoint, Tape, Tensor};
use sha2::{Digest, Sha256};

fn small(rel_bias: bool) -> BackboneConfig {
    BackboneConfig {
        d_model: 32,
        n_heads: 4,
        d_ffn: 64,
        rel_bias,
        ..BackboneConfig::default()
    }
}

fn model(seed: u64) -> Backbone<f64> {
    let mut m = Backbone::new(small(true), seed).unwrap();
    // Non-zero relative bias so the position paths are exercised.
    for name in ["enc.rel_bias", "dec.rel_bias"] {
        let id = m.store.id(name).unwrap();
        for (i, v) in m.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f64 * 0.05 - 0.3;
        }
    }
    m
}

fn window(p: usize, pad: usize) -> ChunkWindow {
    ChunkWindow {
        task_text: vec![4, 7, 32],
        audio: (0..30).map(|i| if i < 4 { 501 } else { (i * 37) % 500 }).collect(),
        history: std::array::from_fn(|part| {
            (0..p).map(|i| if i < pad { 257 } else { (i * 11 + part * 50) % 256 }).collect()
        }),
        target_len: 5,
        chunk_index: 0,
    }
}

fn motion_inputs(n: usize, salt: usize) -> Vec<DecToken> {
    let mut v = vec![DecToken::Bos];
    v.extend((0..n).map(|i| DecToken::Motion(std::array::from_fn(|p| (i * 31 + p * 7 + salt) % 256))));
    v
}

#[test]
fn audio_span_for_default_chunking() {
    // (P + N) * s = 90 motion frames -> 150 audio tokens.
    let w = ChunkWindow {
        task_text: vec![],
        audio: vec![1; 150],
        history: std::array::from_fn(|_| vec![3; 10]),
        target_len: 5,
        chunk_index: 0,
    };
    let p = pack_template(&w, 512).unwrap();
    assert_eq!(p.ids[0], vocab::sentinel(kfgen::tokenstream::Modality::Audio));
    assert_eq!(p.len(), 151 + 4 * 11);
}

#[test]
fn pad_keys_get_zero_weight_and_compaction_matches_masking() {
    let m = model(1);
    let packed = pack_template(&window(6, 3), 512).unwrap();
    let masked = packed.masked();
    let mut ctx = FwdCtx {
        keep_weights: true,
        ..FwdCtx::default()
    };
    let mut tape = Tape::new(&m.store);
    let full = m.encode_tape(&mut tape, &masked, &mut ctx).unwrap();
    let l = packed.len();
    let pads: Vec<usize> = (0..l).filter(|&i| !packed.valid[i]).collect();
    assert_eq!(pads.len(), 4 + 4 * 3);
    for heads in &ctx.enc_weights {
        for &w in heads {
            let a = tape.value(w).data();
            for r in 0..l {
                for &c in &pads {
                    assert_eq!(a[r * l + c], 0.0);
                }
                let s: f64 = a[r * l..(r + 1) * l].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    let full = tape.value(full).clone();
    let compact = m.encode(&packed.compact(), &mut FwdCtx::default()).unwrap();
    let d = m.cfg.d_model;
    for (row, &orig) in packed.compact().positions.iter().enumerate() {
        for j in 0..d {
            let diff = (compact.row(row)[j] - full.row(orig)[j]).abs();
            assert!(diff < 1e-12, "row {orig}: {diff}");
        }
    }
}

#[test]
fn single_token_is_the_residual_ffn_path() {
    let m = model(2);
    let id = vocab::audio(17);
    let input = EncInput {
        ids: vec![id],
        positions: vec![0],
        key_keep: None,
    };
    let got = m.encode(&input, &mut FwdCtx::default()).unwrap();

    let s = &m.store;
    let p = |n: &str| s.value(s.id(n).unwrap()).clone();
    let mut t = Tape::<f64>::detached();
    let emb = p("embed");
    let mut x = t.constant(Tensor::new(&[1, 32], emb.row(id).to_vec()).unwrap());
    let ln = |t: &mut Tape<f64>, x, n: &str| {
        let g = t.constant(p(&format!("{n}.g")));
        let b = t.constant(p(&format!("{n}.b")));
        t.layer_norm(x, g, b, 1e-5).unwrap()
    };
    for l in 0..2 {
        let h = ln(&mut t, x, &format!("enc.{l}.ln1"));
        let wv = t.constant(p(&format!("enc.{l}.attn.v.w")));
        let wo = t.constant(p(&format!("enc.{l}.attn.o.w")));
        let v = t.matmul(h, wv).unwrap();
        let o = t.matmul(v, wo).unwrap();
        x = t.add(x, o).unwrap();
        let h = ln(&mut t, x, &format!("enc.{l}.ln2"));
        let up = t.constant(p(&format!("enc.{l}.ffn.up.w")));
        let ub = t.constant(p(&format!("enc.{l}.ffn.up.b")));
        let dn = t.constant(p(&format!("enc.{l}.ffn.down.w")));
        let db = t.constant(p(&format!("enc.{l}.ffn.down.b")));
        let u = t.matmul(h, up).unwrap();
        let u = t.add_row(u, ub).unwrap();
        let u = t.gelu(u).unwrap();
        let f = t.matmul(u, dn).unwrap();
        let f = t.add_row(f, db).unwrap();
        x = t.add(x, f).unwrap();
    }
    let y = ln(&mut t, x, "enc.ln");
    assert!(t.value(y).max_abs_diff(&got) < 1e-12);
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let m = Backbone::<f64>::new(small(false), 3).unwrap();
    let ids: Vec<usize> = vec![vocab::BOS - 3, vocab::audio(4), vocab::audio(9), vocab::part(1, 20), vocab::text(40)];
    let base = EncInput {
        ids: ids.clone(),
        positions: (0..5).collect(),
        key_keep: None,
    };
    let mut swapped = ids.clone();
    swapped.swap(1, 3);
    let sw = EncInput {
        ids: swapped,
        positions: (0..5).collect(),
        key_keep: None,
    };
    let a = m.encode(&base, &mut FwdCtx::default()).unwrap();
    let b = m.encode(&sw, &mut FwdCtx::default()).unwrap();
    let perm = [0, 3, 2, 1, 4];
    for (i, &pi) in perm.iter().enumerate() {
        for j in 0..32 {
            assert!((a.row(i)[j] - b.row(pi)[j]).abs() < 1e-12);
        }
    }
}

fn teacher_logits(m: &Backbone<f64>, inputs: &[DecToken]) -> Vec<Tensor<f64>> {
    let packed = pack_template(&window(6, 2), 512).unwrap();
    let mut ctx = FwdCtx::default();
    let mut tape = Tape::new(&m.store);
    let mem = m.encode_tape(&mut tape, &packed.compact(), &mut ctx).unwrap();
    let h = m.decode_tape(&mut tape, mem, None, inputs, &mut ctx).unwrap();
    let l = m.motion_logits(&mut tape, h).unwrap();
    l.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn decoder_is_causal() {
    let m = model(4);
    let a = teacher_logits(&m, &motion_inputs(7, 0));
    for cut in 1..8 {
        let mut perturbed = motion_inputs(7, 0);
        for t in perturbed.iter_mut().skip(cut) {
            *t = DecToken::Motion([255, 0, 128, 3]);
        }
        let b = teacher_logits(&m, &perturbed);
        for p in 0..4 {
            for i in 0..cut {
                assert_eq!(a[p].row(i), b[p].row(i), "part {p} position {i} cut {cut}");
            }
            assert_ne!(a[p].row(cut), b[p].row(cut));
        }
    }
}

#[test]
fn cached_decoding_is_bitwise_equal_to_full() {
    let m = model(5);
    let inputs = motion_inputs(9, 3);
    let full = teacher_logits(&m, &inputs);
    let packed = pack_template(&window(6, 2), 512).unwrap();
    let mem = m.encode(&packed.compact(), &mut FwdCtx::default()).unwrap();
    let mut state = m.start_decode(&mem).unwrap();
    let mut ctx = FwdCtx::default();
    for (i, &tok) in inputs.iter().enumerate() {
        let h = m.decode_step(&mut state, tok, &mut ctx).unwrap();
        let l = m.motion_logits_of(&h).unwrap();
        for p in 0..4 {
            assert_eq!(l[p].data(), full[p].row(i), "step {i} part {p}");
        }
        for layer in 0..state.n_layers() {
            assert_eq!(state.cache_len(layer), state.emitted());
        }
    }
    assert_eq!(ctx.decoder_steps, inputs.len());
}

#[test]
fn decoder_position_limit_is_enforced() {
    let cfg = BackboneConfig {
        max_dec_positions: 2,
        ..small(true)
    };
    let m = Backbone::<f64>::new(cfg, 0).unwrap();
    let mem = Tensor::zeros(&[3, 32]);
    let mut st = m.start_decode(&mem).unwrap();
    let mut ctx = FwdCtx::default();
    m.decode_step(&mut st, DecToken::Bos, &mut ctx).unwrap();
    m.decode_step(&mut st, DecToken::Motion([1, 2, 3, 4]), &mut ctx).unwrap();
    assert!(m.decode_step(&mut st, DecToken::Motion([1, 2, 3, 4]), &mut ctx).is_err());
}

fn digest(w: &ChunkWindow) -> Vec<u8> {
    let mut h = Sha256::new();
    for part in &w.history {
        for t in part {
            h.update((*t as u64).to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

#[test]
fn chunk_predict_contract() {
    let m = model(6);
    let w = window(10, 0);
    let before = digest(&w);
    let mut ctx = FwdCtx::default();
    let g = m.chunk_predict(&w, Sampling::Greedy, &mut ctx).unwrap();
    assert_eq!(digest(&w), before);
    assert_eq!(ctx.decoder_steps, 5);
    assert!(g.iter().all(|p| p.len() == 5 && p.iter().all(|&t| t < 256)));
    assert_eq!(g, m.chunk_predict(&w, Sampling::Greedy, &mut FwdCtx::default()).unwrap());
    let t0 = m
        .chunk_predict(&w, Sampling::Temperature { tau: 0.0, seed: 9 }, &mut FwdCtx::default())
        .unwrap();
    assert_eq!(g, t0);
    let hot = |seed| {
        m.chunk_predict(&w, Sampling::Temperature { tau: 5.0, seed }, &mut FwdCtx::default())
            .unwrap()
    };
    assert_eq!(hot(1), hot(1));
    assert_ne!(hot(1), hot(2));
}

#[test]
fn part_distributions_normalize() {
    let m = model(7);
    let logits = teacher_logits(&m, &motion_inputs(4, 1));
    for l in &logits {
        assert_eq!(l.shape(), &[5, 256]);
        let mut t = Tape::<f64>::detached();
        let x = t.constant(l.clone());
        let p = t.softmax(x, None).unwrap();
        for row in t.value(p).data().chunks(256) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn upcycled_model_matches_dense_and_round_trips() {
    let dense = model(8);
    let moe = dense.upcycle(&MoeConfig::default(), 99).unwrap();
    assert_eq!(moe.routers().len(), 4);
    let inputs = motion_inputs(5, 2);
    let a = teacher_logits(&dense, &inputs);
    let b = teacher_logits(&moe, &inputs);
    for p in 0..4 {
        assert!(a[p].max_abs_diff(&b[p]) < 1e-9);
    }

    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("bb");
    moe.to_checkpoint("s1").save(&base).unwrap();
    let back = Backbone::<f64>::from_checkpoint(&Checkpoint::load(&base).unwrap()).unwrap();
    assert_eq!(back.cfg, moe.cfg);
    let c = teacher_logits(&back, &inputs);
    for p in 0..4 {
        assert_eq!(b[p], c[p]);
    }
}
