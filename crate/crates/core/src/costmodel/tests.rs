use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::{prop_assert, proptest};

use super::*;
use crate::prune::{baseline_prefill, Pipeline};
use crate::testutil;
use crate::vip::SelectionResult;

/// Sum of `2·m·k·n` over every matmul in one prefill layer, listed shape by shape.
fn layer_matmul_oracle(s: u64, d: u64, heads: u64, ffn: u64) -> u64 {
    let hd = d / heads;
    let mut shapes: Vec<(u64, u64, u64)> = vec![(s, d, d); 4];
    for _ in 0..heads {
        shapes.push((s, hd, s));
        shapes.push((s, s, hd));
    }
    shapes.extend([(s, d, ffn), (s, d, ffn), (s, ffn, d)]);
    shapes.iter().map(|&(m, k, n)| 2 * m * k * n).sum()
}

fn t(x: f64) -> f64 {
    x / 1e12
}

#[test]
fn kv_examples() {
    assert_eq!(kv_elements(4, 20, 8), 1280);
    assert_eq!(kv_elements(4, 10, 8) * 2, kv_elements(4, 20, 8));
}

#[test]
fn layer_flops_matches_shape_oracle() {
    for &(s, d, h, f) in &[(1, 8, 2, 16), (20, 16, 4, 32), (257, 64, 8, 176), (5074, 3584, 28, 18944)] {
        assert_eq!(layer_flops(s, d, h, f), layer_matmul_oracle(s as u64, d as u64, h as u64, f as u64) as f64);
    }
    assert!(layer_flops(400, 32, 4, 64) > 2.0 * layer_flops(200, 32, 4, 64));
}

#[test]
fn decode_variant_is_linear_in_cache() {
    let (d, f) = (64, 128);
    let a = decode_layer_flops(100, d, f);
    let b = decode_layer_flops(200, d, f);
    let c = decode_layer_flops(300, d, f);
    assert_eq!(c - b, b - a);
    assert_eq!(b - a, 4.0 * 100.0 * d as f64);
}

#[test]
fn presets_table() {
    let names: Vec<String> = presets().into_iter().map(|p| p.name).collect();
    assert_eq!(names, ["qwen2.5-vl-3b", "qwen2.5-vl-7b", "llava-1.5-7b", "llava-1.5-13b"]);
    let q = preset("qwen2.5-vl-7b").unwrap();
    assert_eq!((q.layers, q.hidden, q.heads, q.prune_layer), (28, 3584, 28, 19));
    for p in presets() {
        p.validate().unwrap();
        assert_eq!(p.prune_layer, default_prune_layer(p.layers));
    }
    assert_eq!(preset("qwen2.5-vl-3b").unwrap().prune_layer, 24);
    assert_eq!(preset("llava-1.5-7b").unwrap().prune_layer, 22);
    assert_eq!(preset("llava-1.5-13b").unwrap().prune_layer, 27);
    assert!(preset("gpt-2").is_none());
}

#[test]
fn unpruned_ratio_is_one_up_to_vip() {
    let p = preset("llava-1.5-7b").unwrap();
    let e = pruned_prefill_flops(&p, 600, 600).unwrap();
    assert_eq!(e.pruned - e.vip, e.baseline);
    assert!(e.ratio > 1.0 && e.ratio < 1.01);
}

#[test]
fn custom_arch_has_no_predictor_cost_unless_sized() {
    let c = ArchPreset::custom(4, 8, 1, 32, Some(3));
    c.validate().unwrap();
    let e = pruned_prefill_flops(&c, 20, 20).unwrap();
    assert_eq!(e.vip, 0.0);
    assert_eq!(e.ratio, 1.0);
    let sized = c.with_predictor(16, 8, 8, 2);
    sized.validate().unwrap();
    assert!(pruned_prefill_flops(&sized, 20, 20).unwrap().vip > 0.0);
}

#[test]
fn rejects_growing_sequence() {
    let p = preset("llava-1.5-7b").unwrap();
    assert!(pruned_prefill_flops(&p, 100, 101).is_err());
    assert!(pruned_prefill_flops(&p, 0, 0).is_err());
    let mut bad = p.clone();
    bad.prune_layer = 41;
    assert!(bad.validate().is_err());
}

#[test]
fn qwen7b_efficiency_row() {
    // Reference: 77.8 T baseline, 53.8 T pruned, cache 5073.9 -> 202.5.
    let p = preset("qwen2.5-vl-7b").unwrap();
    let e = pruned_prefill_flops(&p, 5074, 203).unwrap();
    assert!((e.ratio - 53.8 / 77.8).abs() <= 0.05, "ratio {}", e.ratio);
    assert!((t(e.baseline) / 77.8 - 1.0).abs() <= 0.15, "baseline {} T", t(e.baseline));
    let r = analytic_report(&p, 5074, 203, 2).unwrap();
    assert_eq!(r.pruned.cache_len, 203);
    assert!((r.pruned.cache_len as f64 - 202.5).abs() < 1.0);
}

#[test]
fn qwen3b_prune_layer_sweep() {
    let reference = [17.4, 23.1, 28.5, 34.1];
    let mut last = 0.0;
    for (k, want) in [18, 24, 30, 36].into_iter().zip(reference) {
        let mut p = preset("qwen2.5-vl-3b").unwrap();
        p.prune_layer = k;
        let got = t(pruned_prefill_flops(&p, 5074, 203).unwrap().pruned);
        assert!(got > last);
        assert!((got / want - 1.0).abs() <= 0.2, "K={k}: {got} vs {want}");
        last = got;
    }
}

#[test]
fn decode_ratio_tracks_cache_in_the_attention_term() {
    let p = preset("qwen2.5-vl-7b").unwrap();
    let (d, f) = (p.hidden, p.ffn);
    let (n0, n1) = (5075, 204);
    let attn = |n: usize| decode_layer_flops(n, d, f) - decode_layer_flops(0, d, f);
    assert_eq!(attn(n1) / attn(n0), n1 as f64 / n0 as f64);
    // The full per-token ratio reaches the cache ratio only once n dominates D and ffn.
    let (m0, m1) = (n0 * 10_000, n1 * 10_000);
    let full = decode_layer_flops(m1, d, f) / decode_layer_flops(m0, d, f);
    assert!((full - m1 as f64 / m0 as f64).abs() < 0.01);
}

#[test]
fn report_roundtrip_and_csv() {
    let p = preset("llava-1.5-13b").unwrap();
    let r = analytic_report(&p, 700, 77, 2).unwrap();
    let s = serde_json::to_string(&r).unwrap();
    let back: CostReport = serde_json::from_str(&s).unwrap();
    assert_eq!(back, r);
    let rec = r.csv_record();
    assert_eq!(rec.len(), CSV_HEADER.len());
    assert_eq!(&rec[..6], ["llava-1.5-13b", "40", "5120", "27", "700", "77"]);
    assert_eq!(rec[9], kv_elements(40, 700, 5120).to_string());
    assert_eq!(r.kv_bytes_pruned, 2 * kv_elements(40, 77, 5120));
}

#[test]
fn counted_matches_analytic_on_toy_runs() {
    for &(layers, d, heads, grid, nt) in &[(4, 16, 2, (4, 4), 4), (6, 32, 4, (8, 8), 8), (3, 16, 4, (2, 5), 3)] {
        let bb = testutil::backbone(layers, d, heads, grid, 11);
        let cfg = bb.config().clone();
        let vip_cfg = testutil::vip_config(3);
        let params = testutil::params(&bb, &vip_cfg, 5);
        let img = testutil::image(9, grid.0, grid.1);
        let q = testutil::question(4, nt, cfg.vocab);
        let nv = grid.0 * grid.1;
        let s = nv + nt;

        let base = baseline_prefill(&bb, &img, &q).unwrap();
        assert_eq!(base.prefill_flops as f64, layers as f64 * layer_flops(s, d, heads, cfg.ffn));
        assert_eq!(base.cache.element_count() as u64, kv_elements(layers, s, d));

        let out = Pipeline::new(&bb, &params, &vip_cfg).glimpse_prune_prefill(&img, &q).unwrap();
        let kept = out.selection.keep.len();
        let k = cfg.prune_layer;
        let sp = kept + nt;
        let expected = k as f64 * layer_flops(s + 1, d, heads, cfg.ffn) + (layers - k) as f64 * layer_flops(sp, d, heads, cfg.ffn);
        assert_eq!(out.stats.prefill_flops_counted as f64, expected);
        let vc = bb.visual.config().channels;
        assert_eq!(out.stats.vip_flops_counted, vip_flops(nv, heads, vc, &vip_cfg));
        assert_eq!(out.cache.element_count() as u64, kv_elements(layers, sp, d));
        assert_eq!(out.stats.cache_len_before, s + 1);

        let arch = ArchPreset::custom(layers, d, heads, cfg.ffn, Some(k));
        let with_glimpse = RunStats {
            cache_len: s + 1,
            prefill_flops: layers as f64 * layer_flops(s + 1, d, heads, cfg.ffn),
            decode_flops_per_token: 0.0,
            kv_elements: kv_elements(layers, s + 1, d),
        };
        let pruned = RunStats {
            cache_len: sp,
            prefill_flops: out.stats.prefill_flops_counted as f64,
            decode_flops_per_token: 0.0,
            kv_elements: out.cache.element_count() as u64,
        };
        let r = compare_report(&arch, with_glimpse, pruned, 8);
        assert_eq!(r.kv_ratio, sp as f64 / (s + 1) as f64);
    }
}

#[test]
fn counted_decode_matches_variant() {
    let bb = testutil::backbone(4, 16, 2, (4, 4), 2);
    let cfg = bb.config().clone();
    let vip_cfg = testutil::vip_config(1);
    let params = testutil::params(&bb, &vip_cfg, 1);
    let img = testutil::image(3, 4, 4);
    let q = testutil::question(3, 5, cfg.vocab);
    let keep = SelectionResult { keep: vec![1, 6, 7, 12], num_visual: 16 };
    let pipe = Pipeline::new(&bb, &params, &vip_cfg);
    let out = pipe.prefill_with_keep(&img, &q, &keep).unwrap();
    let len = out.cache.uniform_len().unwrap();
    let gen = pipe.decode_from(out, 4).unwrap();
    for (i, &f) in gen.decode_flops.iter().enumerate() {
        let expected = cfg.layers as f64 * decode_layer_flops(len + i + 1, cfg.hidden, cfg.ffn);
        assert_eq!(f as f64, expected);
    }
}

proptest! {
    #[test]
    fn monotone_in_pruned_length(s in 1usize..4000, a in 0usize..4000, b in 0usize..4000, idx in 0usize..4) {
        let p = presets().swap_remove(idx);
        let (lo, hi) = (a.min(b).min(s), a.max(b).min(s));
        let el = pruned_prefill_flops(&p, s, lo).unwrap();
        let eh = pruned_prefill_flops(&p, s, hi).unwrap();
        prop_assert!(el.pruned <= eh.pruned);
        prop_assert!(kv_elements(p.layers, lo, p.hidden) <= kv_elements(p.layers, hi, p.hidden));
        let r = analytic_report(&p, s, hi, 2).unwrap();
        prop_assert!(r.kv_ratio > 0.0 || hi == 0);
        prop_assert!(r.kv_ratio <= 1.0 && r.decode_ratio <= 1.0);
        prop_assert!(el.pruned - el.vip <= el.baseline);
    }
}
