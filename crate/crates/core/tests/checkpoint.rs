use proptest::prelude::*;
use xrf_mae::dataset::Task;
use xrf_mae::network::{ModelConfig, ModelParameters};
use xrf_mae::optimize::{load_checkpoint, save_checkpoint, Checkpoint, MetricRow, RngState, Stage, TrainConfig};
use xrf_mae::transform::{fit_target_norm, TransformState};
use xrf_mae::Error;

fn config(patch: usize, n_patches: usize, heads: usize, per_head: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        n_channels: patch * n_patches,
        patch_size: patch,
        embed_dim: heads * per_head * 2,
        encoder_depth: depth,
        encoder_heads: heads,
        decoder_dim: heads * 2,
        decoder_depth: 1,
        decoder_heads: heads,
        mlp_ratio: 2.0,
    }
}

fn checkpoint(cfg: ModelConfig, finetuned: bool, seed: u64) -> Checkpoint {
    let params = ModelParameters::init(&cfg, !finetuned, finetuned, seed).unwrap();
    Checkpoint {
        stage: if finetuned { Stage::Finetune } else { Stage::Pretrain },
        task: finetuned.then_some(Task::TOC),
        model_config: cfg,
        params,
        transform: TransformState::instance_norm(),
        target_norm: finetuned.then(|| fit_target_norm(&[0.25, 1.75, 3.0]).unwrap()),
        train_config: TrainConfig::pretrain_default(),
        epoch: 3,
        rng: RngState { seed, next_epoch: 4 },
        metrics: vec![MetricRow {
            epoch: 0,
            split: "train".into(),
            loss: 0.1 + seed as f64,
            lr: 1e-5,
        }],
        train_ids: vec!["a".into(), "b".into()],
    }
}

fn small() -> Checkpoint {
    checkpoint(config(4, 4, 2, 4, 1), true, 7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_lossless(
        patch in 1usize..6,
        n_patches in 1usize..6,
        heads in 1usize..3,
        per_head in 1usize..4,
        depth in 0usize..3,
        finetuned in any::<bool>(),
        seed in any::<u64>(),
        scale in -1e300f64..1e300,
    ) {
        let mut ckpt = checkpoint(config(patch, n_patches, heads, per_head, depth), finetuned, seed);
        // Push values to extreme magnitudes; f64 storage must keep every bit.
        ckpt.params.encoder.patch_embed.weight.as_mut_slice()[0] = scale;
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn file_round_trip_leaves_no_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = small();
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn every_payload_byte_is_covered_by_a_digest() {
    let bytes = small().to_bytes().unwrap();
    let payload_start = bytes.len() - small().params.count() * 8;
    for i in (payload_start..bytes.len()).step_by(13) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Digest(_))),
            "flip at byte {i} went unnoticed"
        );
    }
}

#[test]
fn version_mismatch_is_reported_explicitly() {
    let bytes = small().to_bytes().unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"format_version\":1").unwrap();
    let mut bad = bytes.clone();
    bad[at + "\"format_version\":".len()] = b'9';
    match Checkpoint::from_bytes(&bad) {
        Err(Error::Version { found: 9, expected: 1 }) => {}
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let bytes = small().to_bytes().unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 20, 5] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    let err = Checkpoint::from_bytes(&long).unwrap_err();
    assert!(err.to_string().contains("trailing"), "{err}");
    assert!(Checkpoint::from_bytes(b"PK\x03\x04 not ours").is_err());
}

#[test]
fn load_names_the_file_on_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.ckpt");
    std::fs::write(&path, b"XRFMAE-CKPT\n{").unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("broken.ckpt"), "{err}");
    let missing = load_checkpoint(dir.path().join("absent.ckpt")).unwrap_err();
    assert!(missing.to_string().contains("absent.ckpt"), "{missing}");
}
