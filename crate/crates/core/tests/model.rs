mod common;

use std::path::Path;

use ctl_tensor::{Tape, Tensor};
use ctlformer::data::container::save_slice;
use ctlformer::data::{generate_phantom, PhantomSpec};
use ctlformer::model::{
    bind_params, block_param_count, forward, init, load_checkpoint, load_checkpoint_with,
    param_count, param_layout, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};
use ctlformer::{Error, Model, ModelConfig, TensorError};
use proptest::prelude::*;
use rand::Rng;

const BUDGET: f64 = 1_850_000.0;

fn tile(n: usize, seed: u64) -> Tensor {
    let mut r = common::rng(seed);
    Tensor::from_fn(&[1, n, n], |_| r.random_range(0.0..255.0f32))
}

fn tiny_at(tile_size: usize) -> ModelConfig {
    ModelConfig {
        tile_size,
        ..ModelConfig::tiny()
    }
}

#[test]
fn init_is_reproducible_from_seed() {
    let cfg = ModelConfig::desk();
    assert_eq!(init(&cfg, 7).unwrap(), init(&cfg, 7).unwrap());
    assert_ne!(init(&cfg, 7).unwrap(), init(&cfg, 8).unwrap());
}

#[test]
fn init_follows_the_stated_rules() {
    let cfg = ModelConfig::default();
    let p = init(&cfg, 0).unwrap();
    for (name, t) in p.iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with("alpha_raw") {
            let a = 1.0 / (1.0 + (-t.item().unwrap() as f64).exp());
            assert!((a - cfg.attention.alpha_init).abs() < 1e-6, "{name}");
        }
        if name.ends_with("proj.weight") {
            let bound = 2.0 * 0.02 + 1e-7;
            assert!(
                t.data().iter().all(|&v| (v as f64).abs() <= bound),
                "{name}"
            );
        }
    }
}

#[test]
fn output_shape_matches_input_for_default_tiles() {
    for t in [32, 64] {
        let cfg = ModelConfig {
            tile_size: t,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let y = m.denoise_tile(&tile(t, 2)).unwrap();
        assert_eq!(y.shape(), &[1, t, t]);
    }
}

#[test]
fn wrong_tile_size_is_a_shape_error() {
    let m = Model::new(ModelConfig::tiny(), 1).unwrap();
    let err = m.denoise_tile(&tile(24, 3)).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Shape(_))), "{err}");
}

#[test]
fn zero_head_residual_model_is_the_identity() {
    for cfg in [ModelConfig::tiny(), ModelConfig::desk()] {
        let mut m = Model::new(cfg.clone(), 4).unwrap();
        m.zero_head();
        let x = tile(cfg.tile_size, 5);
        assert_eq!(m.denoise_tile(&x).unwrap().data(), x.data());
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let m = Model::new(ModelConfig::desk(), 6).unwrap();
    let x = tile(32, 7);
    assert_eq!(m.denoise_tile(&x).unwrap(), m.denoise_tile(&x).unwrap());
}

#[test]
fn forward_exposes_one_gate_per_token_and_a_trace_per_block() {
    let cfg = ModelConfig::desk();
    let m = Model::new(cfg.clone(), 8).unwrap();
    let mut tape = Tape::<f32>::new();
    let (_, mv) = bind_params(&mut tape, &cfg, &m.params, false).unwrap();
    let x = tape.constant(tile(32, 9));
    let out = forward(&mut tape, &cfg, &mv, x).unwrap();
    assert_eq!(out.gates.len, cfg.num_tokens());
    assert_eq!(out.traces.len(), cfg.depth);
    assert!(tape
        .value(out.gates.g)
        .data()
        .iter()
        .all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn default_parameter_count_is_near_budget() {
    let n = param_count(&ModelConfig::default()) as f64;
    let rel = (n - BUDGET) / BUDGET;
    assert!(rel.abs() <= 0.20, "{n} is {:+.2}% off", 100.0 * rel);
}

#[test]
fn parameter_count_is_linear_in_depth() {
    let base = ModelConfig::default();
    let per_block = block_param_count(&base);
    for depth in [1, 2, 4, 8] {
        let deeper = ModelConfig {
            depth: 2 * depth,
            ..base.clone()
        };
        let shallow = ModelConfig {
            depth,
            ..base.clone()
        };
        assert_eq!(
            param_count(&deeper) - param_count(&shallow),
            depth * per_block
        );
    }
}

#[test]
fn parameter_count_equals_materialized_count() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig::desk(),
        ModelConfig::tiny(),
    ] {
        assert_eq!(param_count(&cfg), init(&cfg, 0).unwrap().numel());
        let layout: usize = param_layout(&cfg)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        assert_eq!(layout, param_count(&cfg));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn parameter_formula_matches_random_configs(
        stem in 1usize..6, heads in 1usize..4, head_dim in 1usize..5, depth in 1usize..4,
        hidden in prop::sample::select(vec![0usize, 12]), gate_hidden in 1usize..8, mlp in 1usize..3,
        tile_size in prop::sample::select(vec![16usize, 20, 32]),
    ) {
        let dim = heads * head_dim;
        let mut cfg = ModelConfig::tiny();
        cfg.tokenizer.stem_channels = stem;
        cfg.tokenizer.embed_dim = dim;
        cfg.tokenizer.token_hidden = hidden;
        cfg.attention.dim = dim;
        cfg.attention.heads = heads;
        cfg.attention.mlp_ratio = mlp;
        cfg.gate.hidden = gate_hidden;
        cfg.depth = depth;
        cfg.tile_size = tile_size;
        cfg.validate().unwrap();
        prop_assert_eq!(param_count(&cfg), init(&cfg, 1).unwrap().numel());
    }
}

fn checkpoint(cfg: ModelConfig, with_moments: bool) -> Checkpoint {
    let params = init(&cfg, 11).unwrap();
    let moments = with_moments.then(|| (init(&cfg, 12).unwrap(), init(&cfg, 13).unwrap()));
    Checkpoint {
        config: cfg,
        params,
        step: 123,
        seed: 99,
        moments,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for moments in [false, true] {
        let path = dir.path().join(format!("m{moments}.ctlf"));
        let ck = checkpoint(ModelConfig::tiny(), moments);
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ctlf"), dir.path().join("b.ctlf"));
    save_checkpoint(&checkpoint(ModelConfig::desk(), true), &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn reloaded_model_evaluates_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ctlf");
    let ck = checkpoint(ModelConfig::desk(), false);
    let m = Model::from_parts(ck.config.clone(), ck.params.clone()).unwrap();
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let r = Model::from_parts(back.config, back.params).unwrap();
    let x = tile(32, 14);
    assert_eq!(m.denoise_tile(&x).unwrap(), r.denoise_tile(&x).unwrap());
}

fn integrity_detail(bytes: &[u8]) -> String {
    match Checkpoint::from_bytes(bytes, Path::new("x.ctlf")) {
        Err(Error::Integrity { detail, .. }) => detail,
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = checkpoint(ModelConfig::tiny(), false).to_bytes().unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        integrity_detail(&bytes[..cut]);
    }
    let detail = integrity_detail(&bytes[..bytes.len() - 1]);
    assert!(detail.contains("head."), "{detail}");
}

#[test]
fn corrupted_record_names_the_record() {
    let mut bytes = checkpoint(ModelConfig::tiny(), false).to_bytes().unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 0x40;
    let detail = integrity_detail(&bytes);
    assert!(detail.contains("head.bias"), "{detail}");
    let mut extra = checkpoint(ModelConfig::tiny(), false).to_bytes().unwrap();
    extra.push(0);
    assert!(integrity_detail(&extra).contains("trailing"));
}

#[test]
fn unknown_version_is_a_version_error() {
    let mut bytes = checkpoint(ModelConfig::tiny(), false).to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    match Checkpoint::from_bytes(&bytes, Path::new("x.ctlf")) {
        Err(Error::Version {
            found: 7,
            expected: 1,
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
}

#[test]
fn slice_file_is_not_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ctsl");
    let img = generate_phantom(&PhantomSpec {
        size: 32,
        ..PhantomSpec::default()
    })
    .unwrap();
    save_slice(&img, &path).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Integrity { .. })
    ));
    let missing = dir.path().join("none.ctlf");
    assert!(matches!(load_checkpoint(&missing), Err(Error::Io { .. })));
}

#[test]
fn tile_override_must_match_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ctlf");
    save_checkpoint(&checkpoint(tiny_at(16), false), &path).unwrap();
    assert!(load_checkpoint_with(&path, Some(16)).is_ok());
    assert!(load_checkpoint_with(&path, None).is_ok());
    assert!(matches!(
        load_checkpoint_with(&path, Some(32)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn from_parts_rejects_a_mismatched_layout() {
    let params = init(&ModelConfig::tiny(), 0).unwrap();
    assert!(Model::from_parts(ModelConfig::desk(), params).is_err());
}
