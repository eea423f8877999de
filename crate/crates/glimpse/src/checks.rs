//! Invariant suite behind `glimpse selftest`.

use glimpse_core::backbone::{append_glimpse, Backbone, DecoderConfig, GlimpseEmbeddings, Image, VisualStubConfig};
use glimpse_core::costmodel::{kv_elements, layer_flops, preset, pruned_prefill_flops};
use glimpse_core::numerics::{FlopCounter, Rng};
use glimpse_core::prune::{baseline_prefill, reference_oracle, GlimpseParams, Pipeline};
use glimpse_core::training::{finite_difference_check, generate_dataset, LossWeights};
use glimpse_core::vip::{retention_cap, select_tokens, vip_flops, ImportanceMap, SelectionResult, VipConfig, VipParams};
use glimpse_core::vocab::{TokenId, BOS, MIN_VOCAB};

/// Deliberate corruption used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Swap one kept visual index for a dropped one before pruning.
    PruneIndices,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random backbone, glimpse rows, predictor with a live head, image and question.
pub struct Toy {
    pub backbone: Backbone,
    pub params: GlimpseParams,
    pub vip: VipConfig,
    pub image: Image,
    pub question: Vec<TokenId>,
}

impl Toy {
    pub fn new(layers: usize, hidden: usize, heads: usize, grid: (usize, usize), nt: usize, seed: u64) -> Self {
        let dec = DecoderConfig::new(layers, hidden, heads, 2 * hidden, MIN_VOCAB, seed);
        let vis = VisualStubConfig {
            grid_h: grid.0,
            grid_w: grid.1,
            channels: 8,
            levels: 2,
            seed: seed ^ 0x5eed,
        };
        let backbone = Backbone::new(&dec, &vis).expect("toy backbone");
        let mut vip = VipConfig::new(8, 8, 2, 2, seed.wrapping_add(7));
        vip.tau = 0.5;
        vip.r_max = Some(0.5);
        let mut rng = Rng::new(seed.wrapping_mul(31).wrapping_add(3));
        let glimpse = GlimpseEmbeddings::random(layers, hidden, 1.0, &mut rng);
        let mut vparams = VipParams::init(&vip, heads, 8).expect("toy vip");
        for w in vparams.head_w.data_mut() {
            *w = rng.uniform(-2.0, 2.0);
        }
        let pixels = (0..grid.0 * grid.1 * 3).map(|_| rng.below(256) as u8).collect();
        let image = Image::new(grid.0, grid.1, pixels).expect("toy image");
        let mut question = vec![BOS];
        while question.len() < nt {
            question.push(rng.below(MIN_VOCAB) as TokenId);
        }
        Self {
            backbone,
            params: GlimpseParams { glimpse, vip: vparams },
            vip,
            image,
            question,
        }
    }

    fn continuation(&self, n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| 3 + rng.below(MIN_VOCAB - 3) as TokenId).collect()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The keep set with its first member swapped for the first dropped token.
fn corrupt(sel: &SelectionResult) -> SelectionResult {
    let mut keep = sel.keep.clone();
    if let Some(free) = (0..sel.num_visual).find(|i| !keep.contains(i)) {
        keep[0] = free;
        keep.sort_unstable();
    }
    SelectionResult {
        keep,
        num_visual: sel.num_visual,
    }
}

/// Pipeline logits at prefill and over a forced continuation.
fn pipeline_logits(toy: &Toy, keep: &SelectionResult, cont: &[TokenId]) -> Result<Vec<Vec<f64>>, String> {
    let pipe = Pipeline::new(&toy.backbone, &toy.params, &toy.vip);
    let out = pipe.prefill_with_keep(&toy.image, &toy.question, keep).map_err(|e| e.to_string())?;
    let mut cache = out.cache;
    let mut logits = vec![out.last_logits];
    for &t in cont {
        let f = FlopCounter::new();
        logits.push(toy.backbone.decoder.decode_step(&mut cache, t, &f).map_err(|e| e.to_string())?);
    }
    Ok(logits)
}

pub const TOY_LAYERS: [usize; 2] = [4, 6];
pub const TOY_HEADS: [usize; 2] = [2, 4];
pub const TOY_HIDDEN: [usize; 2] = [16, 32];
pub const TOY_GRIDS: [(usize, usize); 2] = [(4, 4), (8, 8)];
pub const TOY_TEXT: [usize; 2] = [4, 8];

/// Every `(L, H, D, grid, Nt, seed)` of the toy matrix.
pub fn toy_matrix(seeds: u64) -> Vec<(usize, usize, usize, (usize, usize), usize, u64)> {
    let mut out = Vec::new();
    for l in TOY_LAYERS {
        for h in TOY_HEADS {
            for d in TOY_HIDDEN {
                for g in TOY_GRIDS {
                    for nt in TOY_TEXT {
                        for s in 0..seeds {
                            out.push((l, h, d, g, nt, s));
                        }
                    }
                }
            }
        }
    }
    out
}

fn oracle_equivalence(fault: Option<Fault>) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut failure = None;
    let matrix = toy_matrix(3);
    for &(l, h, d, g, nt, s) in &matrix {
        let toy = Toy::new(l, d, h, g, nt, s);
        let pipe = Pipeline::new(&toy.backbone, &toy.params, &toy.vip);
        let run = pipe.glimpse_prune_prefill(&toy.image, &toy.question).map_err(|e| e.to_string());
        let result = run.and_then(|out| {
            let cont = toy.continuation(8, s ^ 0xc0de);
            let used = match fault {
                Some(Fault::PruneIndices) => corrupt(&out.selection),
                None => out.selection.clone(),
            };
            let got = pipeline_logits(&toy, &used, &cont)?;
            let want = reference_oracle(&toy.backbone, &toy.params.glimpse, &toy.image, &toy.question, &out.selection, &cont)
                .map_err(|e| e.to_string())?;
            Ok(got.iter().zip(&want).map(|(a, b)| max_diff(a, b)).fold(0.0, f64::max))
        });
        match result {
            Ok(diff) => worst = worst.max(diff),
            Err(e) => failure = failure.or(Some(e)),
        }
    }
    let passed = failure.is_none() && worst <= 1e-10;
    CheckOutcome {
        name: "oracle-equivalence",
        passed,
        detail: match failure {
            Some(e) => e,
            None => format!("{} configs, max |dlogit| {worst:.2e} (tol 1e-10)", matrix.len()),
        },
    }
}

fn non_perturbation() -> CheckOutcome {
    let mut worst = 0.0f64;
    for &(l, h, d, g, nt, s) in &toy_matrix(1) {
        let toy = Toy::new(l, d, h, g, nt, s);
        let dec = &toy.backbone.decoder;
        let (seq, _) = toy.backbone.sequence(&toy.image, &toy.question).expect("sequence");
        let with = append_glimpse(&seq, &toy.params.glimpse).expect("glimpse");
        let g = Some(&toy.params.glimpse);
        let f = FlopCounter::new();
        let (mut c0, mut c1) = (dec.new_cache(), dec.new_cache());
        let mut plain = dec.start(&seq, None).expect("start");
        let mut glimpsed = dec.start(&with, g).expect("start");
        for layer in 1..=l {
            dec.prefill_layers(&mut plain, None, layer, layer, &mut c0, &f).expect("layer");
            dec.prefill_layers(&mut glimpsed, g, layer, layer, &mut c1, &f).expect("layer");
            for i in 0..seq.total_len() {
                worst = worst.max(max_diff(plain.hidden.row(i), glimpsed.hidden.row(i)));
            }
        }
    }
    CheckOutcome {
        name: "glimpse-non-perturbation",
        passed: worst <= 1e-12,
        detail: format!("max |dh| {worst:.2e} (tol 1e-12)"),
    }
}

fn keep_all_neutrality() -> CheckOutcome {
    let mut worst = 0.0f64;
    for &(l, h, d, g, nt, s) in &toy_matrix(1) {
        let mut toy = Toy::new(l, d, h, g, nt, s);
        toy.vip.tau = 0.0;
        toy.vip.r_max = Some(1.0);
        let pipe = Pipeline::new(&toy.backbone, &toy.params, &toy.vip);
        let out = pipe.glimpse_prune_prefill(&toy.image, &toy.question).expect("prefill");
        assert_eq!(out.selection.keep.len(), g.0 * g.1);
        let cont = toy.continuation(4, s);
        let got = pipeline_logits(&toy, &out.selection, &cont).expect("pipeline");
        let base = baseline_prefill(&toy.backbone, &toy.image, &toy.question).expect("baseline");
        let mut cache = base.cache;
        let mut want = vec![base.last_logits];
        for &t in &cont {
            want.push(toy.backbone.decoder.decode_step(&mut cache, t, &FlopCounter::new()).expect("decode"));
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max(max_diff(a, b));
        }
    }
    CheckOutcome {
        name: "keep-all-neutrality",
        passed: worst <= 1e-10,
        detail: format!("max |dlogit| {worst:.2e} (tol 1e-10)"),
    }
}

fn gradient_check() -> CheckOutcome {
    let mut worst = 0.0f64;
    for point in 0..3u64 {
        let mut toy = Toy::new(4, 16, 2, (4, 4), 4, 40 + point);
        let mut rng = Rng::new(900 + point);
        for t in toy.params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.uniform(-0.5, 0.5);
            }
        }
        let sample = &generate_dataset(50 + point, 1, 4, 4).expect("sample")[0];
        let report = finite_difference_check(&toy.backbone, &toy.params, &toy.vip, sample, &LossWeights::default(), 1e-4).expect("fd");
        worst = report.iter().map(|r| r.1).fold(worst, f64::max);
    }
    CheckOutcome {
        name: "gradient-check",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.2e} over 3 points (tol 1e-4)"),
    }
}

/// Rank-based restatement of the selection rule.
pub fn brute_force_keep(probs: &[f64], tau: f64, r_max: Option<f64>) -> Vec<usize> {
    let n = probs.len();
    let passing: Vec<usize> = (0..n).filter(|&i| probs[i] >= tau).collect();
    if passing.is_empty() {
        let best = (0..n).find(|&i| (0..n).all(|j| probs[j] <= probs[i])).expect("non-empty");
        return vec![best];
    }
    let cap = retention_cap(r_max, n);
    passing
        .iter()
        .copied()
        .filter(|&i| passing.iter().filter(|&&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i)).count() < cap)
        .collect()
}

fn selection_policy() -> CheckOutcome {
    let mut rng = Rng::new(8);
    let cases = 2000;
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = 1 + rng.below(80);
        let coarse = rng.below(2) == 0;
        let probs: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.below(5) as f64 / 4.0 } else { rng.next_f64() })
            .collect();
        let tau = if coarse { rng.below(5) as f64 / 4.0 } else { rng.next_f64() };
        let r_max = (rng.below(4) > 0).then(|| 0.01 + 0.99 * rng.next_f64());
        let mut cfg = VipConfig::new(8, 8, 2, 2, 0);
        cfg.tau = tau;
        cfg.r_max = r_max;
        let map = ImportanceMap {
            logits: vec![0.0; n],
            probs: probs.clone(),
        };
        let got = select_tokens(&map, &cfg).keep;
        let bound = r_max.map_or(n, |r| ((r * n as f64).ceil() as usize).max(1));
        if got != brute_force_keep(&probs, tau, r_max) || got.len() > bound {
            mismatches += 1;
        }
    }
    CheckOutcome {
        name: "selection-policy",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches in {cases} random cases"),
    }
}

fn cost_agreement() -> CheckOutcome {
    let mut bad = Vec::new();
    for &(l, h, d, g, nt, s) in &toy_matrix(1) {
        let toy = Toy::new(l, d, h, g, nt, s);
        let cfg = toy.backbone.config();
        let nv = g.0 * g.1;
        let sl = nv + nt;
        let base = baseline_prefill(&toy.backbone, &toy.image, &toy.question).expect("baseline");
        let pipe = Pipeline::new(&toy.backbone, &toy.params, &toy.vip);
        let out = pipe.glimpse_prune_prefill(&toy.image, &toy.question).expect("prefill");
        let sp = out.selection.keep.len() + nt;
        let k = cfg.prune_layer;
        let analytic = k as f64 * layer_flops(sl + 1, d, h, cfg.ffn) + (l - k) as f64 * layer_flops(sp, d, h, cfg.ffn);
        let ok = base.prefill_flops as f64 == l as f64 * layer_flops(sl, d, h, cfg.ffn)
            && base.cache.element_count() as u64 == kv_elements(l, sl, d)
            && out.stats.prefill_flops_counted as f64 == analytic
            && out.stats.vip_flops_counted == vip_flops(nv, h, 8, &toy.vip)
            && out.cache.element_count() as u64 == kv_elements(l, sp, d);
        if !ok {
            bad.push(format!("L{l} H{h} D{d} Nv{nv} Nt{nt}"));
        }
    }
    CheckOutcome {
        name: "cost-agreement",
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "counted FLOPs and cache elements equal the closed forms".into()
        } else {
            format!("mismatch at {}", bad.join(", "))
        },
    }
}

fn efficiency_tables() -> CheckOutcome {
    let q7 = preset("qwen2.5-vl-7b").expect("preset");
    let e = pruned_prefill_flops(&q7, 5074, 203).expect("estimate");
    let base_t = e.baseline / 1e12;
    let mut ok = (0.64..=0.74).contains(&e.ratio) && (base_t / 77.8 - 1.0).abs() <= 0.15;
    let mut sweep = Vec::new();
    for (k, want) in [(18, 17.4), (24, 23.1), (30, 28.5), (36, 34.1)] {
        let mut p = preset("qwen2.5-vl-3b").expect("preset");
        p.prune_layer = k;
        let got = pruned_prefill_flops(&p, 5074, 203).expect("estimate").pruned / 1e12;
        ok &= (got / want - 1.0).abs() <= 0.2 && sweep.last().is_none_or(|&(_, prev)| got > prev);
        sweep.push((k, got));
    }
    let listed: Vec<String> = sweep.iter().map(|(k, t)| format!("K{k}={t:.1}T")).collect();
    CheckOutcome {
        name: "efficiency-tables",
        passed: ok,
        detail: format!("7b ratio {:.3}, baseline {base_t:.1}T; 3b {}", e.ratio, listed.join(" ")),
    }
}

/// Runs every invariant in a fixed order.
pub fn run_all(fault: Option<Fault>) -> Vec<CheckOutcome> {
    vec![
        oracle_equivalence(fault),
        non_perturbation(),
        keep_all_neutrality(),
        gradient_check(),
        selection_policy(),
        cost_agreement(),
        efficiency_tables(),
    ]
}
