use glimpse::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use glimpse::config::RunConfig;
use glimpse::dataset::Dataset;
use glimpse::render::{ascii_grid, encode_pgm, heatmap_bytes};
use glimpse::CliError;
use glimpse_core::numerics::Rng;
use glimpse_core::prune::GlimpseParams;
use glimpse_core::training::{generate_dataset, AdamW, AdamWConfig};
use proptest::prelude::*;

fn model_and_params(seed: u64) -> (RunConfig, GlimpseParams) {
    let mut cfg = RunConfig::default();
    cfg.resolve_seed(Some(seed)).unwrap();
    let m = cfg.build().unwrap();
    let p = GlimpseParams::init(&m.backbone, &m.vip).unwrap();
    (cfg, p)
}

#[test]
fn default_config_is_desk_scale() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    let d = cfg.decoder();
    assert_eq!((d.layers, d.hidden, d.heads, d.prune_layer), (4, 32, 4, 3));
    assert_eq!(cfg.visual_stub().channels, 64);
    assert_eq!(cfg.train.lr, 3e-3);
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_rejects_unknown_keys() {
    for text in ["sed = 1", "[model]\nlayer = 4", "[vip]\ntau = 0.5\nextra = 1", "[nope]"] {
        assert!(matches!(RunConfig::from_toml(text), Err(CliError::Usage(_))), "{text}");
    }
    let cfg = RunConfig::from_toml("seed = 9\n[model]\nlayers = 6\n[vip]\nr_max = 0.222\n").unwrap();
    assert_eq!(cfg.decoder().prune_layer, 4);
    assert_eq!(cfg.vip_config().r_max, Some(0.222));
    assert_eq!(cfg.decoder().seed, 9);
    assert_eq!(cfg.visual_stub().seed, 10);
}

#[test]
fn flag_seed_beats_file_seed() {
    let mut cfg = RunConfig::from_toml("seed = 9").unwrap();
    assert_eq!(cfg.resolve_seed(Some(4)).unwrap(), 4);
    let mut cfg = RunConfig::from_toml("seed = 9").unwrap();
    assert_eq!(cfg.resolve_seed(None).unwrap(), 9);
}

#[test]
fn dataset_roundtrip_and_validation() {
    let samples = generate_dataset(5, 12, 6, 10).unwrap();
    let ds = Dataset::new(5, 6, 10, samples);
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    let back = Dataset::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, ds);

    let text = String::from_utf8(buf).unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
    assert!(matches!(Dataset::read_from(bumped.as_bytes()), Err(CliError::Format(m)) if m.contains("version 2")));
    let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert!(Dataset::read_from(truncated.as_bytes()).is_err());
    let bad_mask = text.replacen("\"mask\":[0", "\"mask\":[2", 1);
    assert!(Dataset::read_from(bad_mask.as_bytes()).is_err());
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let (cfg, p) = model_and_params(1);
    let json = Checkpoint::new(&cfg, &p, None).to_json();
    let wrong = json.replacen(
        &format!("\"format_version\":{CHECKPOINT_VERSION}"),
        &format!("\"format_version\":{}", CHECKPOINT_VERSION + 1),
        1,
    );
    let err = Checkpoint::from_json(&wrong).unwrap_err();
    assert!(err.to_string().contains("not supported"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(Checkpoint::from_json("{\"config\":{}}").is_err());
}

#[test]
fn checkpoint_group_shapes_are_checked() {
    let (cfg, p) = model_and_params(2);
    let mut ck = Checkpoint::new(&cfg, &p, None);
    ck.vip[0].shape = vec![1, 1];
    assert!(ck.restore().is_err());
    let mut ck = Checkpoint::new(&cfg, &p, None);
    ck.vip.pop();
    assert!(ck.restore().is_err());
}

#[test]
fn heatmap_and_grid() {
    assert_eq!(heatmap_bytes(&[0.0, 0.5, 1.0, 0.25]), [0, 128, 255, 64]);
    let pgm = encode_pgm(&[0.0, 1.0, 0.5, 0.2, 0.9, 0.1], 2, 3).unwrap();
    assert_eq!(&pgm[..11], b"P5\n3 2 255\n");
    assert_eq!(&pgm[11..], [0, 255, 128, 51, 230, 26]);
    assert!(encode_pgm(&[0.5; 5], 2, 3).is_err());
    assert_eq!(ascii_grid(&[0, 4, 5], 2, 3), ["#..", ".##"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(seed in any::<u64>(), scale in -300i32..300, with_opt in any::<bool>()) {
        let (cfg, mut p) = model_and_params(seed % 1000);
        let mut rng = Rng::new(seed);
        let mag = 10f64.powi(scale);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.normal() * mag;
            }
        }
        let opt = with_opt.then(|| {
            let shapes: Vec<_> = p.named().into_iter().map(|(_, t)| t).collect();
            let mut o = AdamW::new(AdamWConfig::default(), &shapes);
            for m in o.m.iter_mut().chain(o.v.iter_mut()) {
                for v in m.data_mut() {
                    *v = rng.uniform(-1.0, 1.0) * mag.abs();
                }
            }
            o.step = seed % 97;
            o
        });
        let ck = Checkpoint::new(&cfg, &p, opt);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        prop_assert_eq!(&back, &ck);
        let (_, restored) = back.restore().unwrap();
        for ((_, a), (_, b)) in restored.named().into_iter().zip(p.named()) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dataset_file_roundtrip(seed in any::<u64>(), h in 2usize..12, w in 2usize..12, n in 0usize..6) {
        let ds = Dataset::new(seed, h, w, generate_dataset(seed, n, h, w).unwrap());
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
