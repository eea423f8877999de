use alloc::vec::Vec;

use super::*;
use crate::numerics::{FlopCounter, Tensor};
use crate::prune::{dense_forward, DenseRow, RowKind};
use crate::testutil;

fn setup(seed: u64) -> (Backbone, TokenSequence, GlimpseEmbeddings) {
    let bb = testutil::backbone(4, 16, 2, (4, 4), seed);
    let img = testutil::image(seed + 1, 4, 4);
    let q = testutil::question(seed + 2, 5, bb.config().vocab);
    let (seq, _) = bb.sequence(&img, &q).unwrap();
    let mut rng = crate::numerics::Rng::new(seed + 3);
    let g = GlimpseEmbeddings::random(4, 16, 1.0, &mut rng);
    (bb, seq, g)
}

#[test]
fn append_glimpse_contract() {
    let (bb, seq, g) = setup(1);
    let with = append_glimpse(&seq, &g).unwrap();
    assert_eq!(with.total_len(), seq.total_len() + 1);
    assert!(with.glimpse_present);
    assert_eq!(with.glimpse_position(), Some(16 + 5));
    let emb = bb.decoder.input_embeddings(&with, Some(&g)).unwrap();
    assert_eq!(emb.row(with.total_len() - 1), g.row(0));
    assert!(matches!(append_glimpse(&with, &g), Err(crate::Error::State(_))));
}

#[test]
fn glimpse_does_not_perturb_other_rows() {
    let (bb, seq, g) = setup(2);
    let dec = &bb.decoder;
    let with = append_glimpse(&seq, &g).unwrap();
    let f = FlopCounter::new();
    let mut plain_cache = dec.new_cache();
    let mut glimpse_cache = dec.new_cache();
    let mut plain = dec.start(&seq, None).unwrap();
    let mut glimpsed = dec.start(&with, Some(&g)).unwrap();
    for layer in 1..=4 {
        dec.prefill_layers(&mut plain, None, layer, layer, &mut plain_cache, &f).unwrap();
        dec.prefill_layers(&mut glimpsed, Some(&g), layer, layer, &mut glimpse_cache, &f).unwrap();
        for i in 0..seq.total_len() {
            assert_eq!(plain.hidden.row(i), glimpsed.hidden.row(i), "layer {layer} row {i}");
        }
    }
}

#[test]
fn split_prefill_matches_monolithic() {
    let (bb, seq, g) = setup(3);
    let dec = &bb.decoder;
    let seq = append_glimpse(&seq, &g).unwrap();
    let f = FlopCounter::new();
    let mut c1 = dec.new_cache();
    let mut s1 = dec.start(&seq, Some(&g)).unwrap();
    dec.prefill_layers(&mut s1, Some(&g), 1, 4, &mut c1, &f).unwrap();
    let mut c2 = dec.new_cache();
    let mut s2 = dec.start(&seq, Some(&g)).unwrap();
    dec.prefill_layers(&mut s2, Some(&g), 1, 3, &mut c2, &f).unwrap();
    dec.prefill_layers(&mut s2, Some(&g), 4, 4, &mut c2, &f).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(c1, c2);
    assert_eq!(c1.lens(), alloc::vec![seq.total_len(); 4]);
}

#[test]
fn invalid_layer_range() {
    let (bb, seq, _) = setup(4);
    let dec = &bb.decoder;
    let mut c = dec.new_cache();
    let mut s = dec.start(&seq, None).unwrap();
    let f = FlopCounter::new();
    for (a, b) in [(0, 2), (3, 2), (1, 5)] {
        assert!(matches!(dec.prefill_layers(&mut s, None, a, b, &mut c, &f), Err(crate::Error::Config(_))));
    }
}

#[test]
fn prefill_logits_match_dense_attention() {
    for seed in 0..3 {
        let (bb, seq, _) = setup(10 + seed);
        let dec = &bb.decoder;
        let mut cache = dec.new_cache();
        let (_, logits) = dec.prefill(&seq, None, &mut cache, &FlopCounter::new()).unwrap();
        let input = dec.input_embeddings(&seq, None).unwrap();
        let rows: Vec<DenseRow> = (0..input.rows())
            .map(|i| DenseRow {
                input: input.row(i).to_vec(),
                position: i,
                kind: RowKind::Prompt { dropped: false },
            })
            .collect();
        let hidden = dense_forward(dec, &rows, None, None).unwrap();
        let dense = dec.logits(hidden.row(rows.len() - 1));
        let diff = logits.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff}");
    }
}

#[test]
fn decode_matches_reprefill() {
    let (bb, seq, _) = setup(5);
    let dec = &bb.decoder;
    let f = FlopCounter::new();
    let mut cache = dec.new_cache();
    dec.prefill(&seq, None, &mut cache, &f).unwrap();
    let mut extended = seq.clone();
    for tok in [4u32, 9, 11] {
        let n = cache.len(0);
        let logits = dec.decode_step(&mut cache, tok, &f).unwrap();
        assert_eq!(cache.lens(), alloc::vec![n + 1; 4]);
        extended.text_ids.push(tok);
        let mut fresh = dec.new_cache();
        let (_, reference) = dec.prefill(&extended, None, &mut fresh, &f).unwrap();
        let diff = logits.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff}");
    }
}

#[test]
fn greedy_decoding_is_deterministic() {
    let run = || {
        let (bb, seq, _) = setup(6);
        let dec = &bb.decoder;
        let f = FlopCounter::new();
        let mut cache = dec.new_cache();
        let (_, mut logits) = dec.prefill(&seq, None, &mut cache, &f).unwrap();
        let mut ids = Vec::new();
        for _ in 0..5 {
            let t = argmax(&logits) as u32;
            ids.push(t);
            logits = dec.decode_step(&mut cache, t, &f).unwrap();
        }
        ids
    };
    assert_eq!(run(), run());
}

#[test]
fn decode_on_empty_cache_fails() {
    let (bb, _, _) = setup(7);
    let mut c = bb.decoder.new_cache();
    assert!(bb.decoder.decode_step(&mut c, 1, &FlopCounter::new()).is_err());
}

#[test]
fn glimpse_attention_shape_and_mass() {
    let (bb, seq, g) = setup(8);
    let dec = &bb.decoder;
    let with = append_glimpse(&seq, &g).unwrap();
    let mut cache = dec.new_cache();
    let mut st = dec.start(&with, Some(&g)).unwrap();
    let k = dec.cfg.prune_layer;
    let probs = dec.prefill_layers(&mut st, Some(&g), 1, k, &mut cache, &FlopCounter::new()).unwrap().unwrap();
    let a = extract_glimpse_attention(&probs, &with).unwrap();
    assert_eq!(a.0.shape(), &[16, 2]);
    assert!(a.0.data().iter().all(|&v| v >= 0.0));
    for h in 0..2 {
        let s: f64 = (0..16).map(|i| a.0.get(i, h)).sum();
        assert!(s <= 1.0 + 1e-12);
        let full: f64 = probs.row(h).iter().sum();
        assert!((full - 1.0).abs() < 1e-12);
    }
    assert!(matches!(extract_glimpse_attention(&probs, &seq), Err(crate::Error::State(_))));
}

#[test]
fn constant_keys_spread_mass_uniformly() {
    let (mut bb, seq, g) = setup(9);
    let k = bb.decoder.cfg.prune_layer;
    let d = bb.decoder.cfg.hidden;
    bb.decoder.layers[k - 1].wk = Tensor::zeros(&[d, d]);
    let with = append_glimpse(&seq, &g).unwrap();
    let mut cache = bb.decoder.new_cache();
    let mut st = bb.decoder.start(&with, Some(&g)).unwrap();
    let probs = bb.decoder.prefill_layers(&mut st, Some(&g), 1, k, &mut cache, &FlopCounter::new()).unwrap().unwrap();
    let a = extract_glimpse_attention(&probs, &with).unwrap();
    let expect = 1.0 / with.total_len() as f64;
    assert!(a.0.data().iter().all(|&v| (v - expect).abs() < 1e-15));
}

#[test]
fn cache_counts_match_formula() {
    let (bb, seq, _) = setup(11);
    let mut cache = bb.decoder.new_cache();
    bb.decoder.prefill(&seq, None, &mut cache, &FlopCounter::new()).unwrap();
    let c = bb.config();
    assert_eq!(cache.element_count(), 2 * c.layers * seq.total_len() * c.hidden);
}
