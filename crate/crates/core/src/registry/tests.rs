use super::*;
use crate::adapter::{forward_adapted, init_loraxs_random, init_loraxs_svd, merge, Adapter};
use crate::testutil::rng_matrix;
use std::fs;
use tempfile::TempDir;

fn adapters_for(
    weights: &BTreeMap<String, Matrix>,
    rank: usize,
    seed: u64,
) -> BTreeMap<String, LoraXsAdapter> {
    weights
        .iter()
        .enumerate()
        .map(|(i, (name, w))| {
            let mut ad = init_loraxs_svd(w, rank, 8.0, 1e-5, seed, seed + 100 + i as u64).unwrap();
            ad.set_r_latent(rng_matrix(rank, rank, seed + 200 + i as u64).scaled(0.1))
                .unwrap();
            (name.clone(), ad)
        })
        .collect()
}

fn base_weights(n: usize, modules: usize, seed: u64) -> BTreeMap<String, Matrix> {
    (0..modules)
        .map(|i| (format!("layer{i}"), rng_matrix(n, n, seed + i as u64)))
        .collect()
}

#[test]
fn roundtrip_is_bitwise_at_f64() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(10, 3, 1);
    let adapters = adapters_for(&weights, 4, 2);
    let opts = SaveOptions {
        base_model_id: "toy-10".into(),
        ..SaveOptions::default()
    };
    let id = save_checkpoint(&adapters, &opts, &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.id(), id);
    assert_eq!(ckpt.base_model_id, "toy-10");
    assert_eq!(ckpt.entries.len(), 3);
    for (name, ad) in &adapters {
        let entry = ckpt.entry(name).unwrap();
        assert_eq!(&entry.r_latent, ad.r_latent());
        assert_eq!(entry.rank, ad.rank());
        assert_eq!(entry.alpha, ad.alpha());
        assert_eq!(entry.svd_seed, ad.svd_seed());
        assert_eq!(entry.n_iter, ad.n_iter());
        assert!(entry.a_frozen.is_none());
    }
}

#[test]
fn file_size_matches_the_layout_arithmetic() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(12, 2, 3);
    let adapters = adapters_for(&weights, 3, 4);
    save_checkpoint(
        &adapters,
        &SaveOptions {
            storage_dtype: StorageDtype::F32,
            ..SaveOptions::default()
        },
        &path,
    )
    .unwrap();
    let bytes = fs::read(&path).unwrap();
    // header(16) + metadata + payload(modules * rank^2 * dtype) + checksum(32)
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = 2 * 3 * 3 * 4;
    assert_eq!(bytes.len() as u64, 16 + meta_len + payload + 32);
}

#[test]
fn tensor_payload_matches_the_worked_arithmetic() {
    // 48 modules at rank 16 in f32: payload is 48 * 256 * 4 = 49,152 bytes.
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(20, 48, 5);
    let adapters = adapters_for(&weights, 16, 6);
    save_checkpoint(
        &adapters,
        &SaveOptions {
            storage_dtype: StorageDtype::F32,
            ..SaveOptions::default()
        },
        &path,
    )
    .unwrap();
    let bytes = fs::read(&path).unwrap();
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_len = bytes.len() as u64 - 16 - meta_len - 32;
    assert_eq!(payload_len, 49_152);
}

#[test]
fn equal_content_gets_equal_ids() {
    let dir = TempDir::new().unwrap();
    let weights = base_weights(8, 2, 7);
    let adapters = adapters_for(&weights, 2, 8);
    let p1 = dir.path().join("a.lxsc");
    let p2 = dir.path().join("b.lxsc");
    let id1 = save_checkpoint(&adapters, &SaveOptions::default(), &p1).unwrap();
    let id2 = save_checkpoint(&adapters, &SaveOptions::default(), &p2).unwrap();
    assert_eq!(id1, id2);

    // Any latent change flips the id.
    let mut changed = adapters.clone();
    let mut r = changed["layer0"].r_latent().clone();
    r.set(0, 0, r.get(0, 0) + 1e-9);
    changed.get_mut("layer0").unwrap().set_r_latent(r).unwrap();
    let id3 = save_checkpoint(&changed, &SaveOptions::default(), &p2).unwrap();
    assert_ne!(id1, id3);
}

#[test]
fn attach_reproduces_forward_behaviour() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(12, 2, 9);
    let adapters = adapters_for(&weights, 3, 10);
    save_checkpoint(&adapters, &SaveOptions::default(), &path).unwrap();

    let ckpt = load_checkpoint(&path).unwrap();
    let attached = attach_checkpoint(&ckpt, &weights).unwrap();
    let x = rng_matrix(12, 4, 11);
    for (name, original) in &adapters {
        let w = &weights[name];
        let before = forward_adapted(w, &Adapter::LoraXs(original.clone()), &x).unwrap();
        let after = forward_adapted(w, &Adapter::LoraXs(attached[name].clone()), &x).unwrap();
        // f64 storage keeps the roundtrip exact.
        assert_eq!(before, after);
    }
}

#[test]
fn attach_at_f32_stays_within_storage_rounding() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(10, 2, 12);
    let adapters = adapters_for(&weights, 3, 13);
    save_checkpoint(
        &adapters,
        &SaveOptions {
            storage_dtype: StorageDtype::F32,
            ..SaveOptions::default()
        },
        &path,
    )
    .unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let attached = attach_checkpoint(&ckpt, &weights).unwrap();
    for (name, original) in &adapters {
        let w = &weights[name];
        let merged_before = merge(w, &Adapter::LoraXs(original.clone())).unwrap();
        let merged_after = merge(w, &Adapter::LoraXs(attached[name].clone())).unwrap();
        let rel = merged_before.sub(&merged_after).unwrap().frobenius_norm()
            / merged_before.frobenius_norm();
        assert!(rel <= 1e-6, "f32 roundtrip relative error {rel}");
    }
}

#[test]
fn attach_rejects_perturbed_base_weights() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(9, 2, 14);
    let adapters = adapters_for(&weights, 2, 15);
    save_checkpoint(&adapters, &SaveOptions::default(), &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();

    let mut perturbed = weights.clone();
    let w = perturbed.get_mut("layer1").unwrap();
    w.set(0, 0, w.get(0, 0) + 1e-3);
    match attach_checkpoint(&ckpt, &perturbed).unwrap_err() {
        Error::BaseModelMismatch { module, .. } => assert_eq!(module, "layer1"),
        other => panic!("expected base-model mismatch, got {other}"),
    }
}

#[test]
fn attach_lists_missing_modules() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(8, 3, 16);
    let adapters = adapters_for(&weights, 2, 17);
    save_checkpoint(&adapters, &SaveOptions::default(), &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();

    let mut partial = weights.clone();
    partial.remove("layer0");
    partial.remove("layer2");
    match attach_checkpoint(&ckpt, &partial).unwrap_err() {
        Error::MissingModules { names } => {
            assert_eq!(names, vec!["layer0".to_string(), "layer2".to_string()]);
        }
        other => panic!("expected missing modules, got {other}"),
    }
}

#[test]
fn random_init_checkpoints_regenerate_from_the_seed() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(11, 1, 18);
    let mut adapters = BTreeMap::new();
    let mut ad = init_loraxs_random(11, 11, 3, 3.0, 1e-5, 77).unwrap();
    ad.set_r_latent(rng_matrix(3, 3, 19).scaled(0.2)).unwrap();
    adapters.insert("layer0".to_string(), ad.clone());
    save_checkpoint(&adapters, &SaveOptions::default(), &path).unwrap();

    let ckpt = load_checkpoint(&path).unwrap();
    let attached = attach_checkpoint(&ckpt, &weights).unwrap();
    assert_eq!(attached["layer0"].a_frozen(), ad.a_frozen());
    assert_eq!(attached["layer0"].b_frozen(), ad.b_frozen());
    assert_eq!(attached["layer0"].r_latent(), ad.r_latent());
}

#[test]
fn self_contained_checkpoints_embed_the_frozen_pair() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(8, 2, 20);
    let adapters = adapters_for(&weights, 2, 21);
    save_checkpoint(
        &adapters,
        &SaveOptions {
            self_contained: true,
            ..SaveOptions::default()
        },
        &path,
    )
    .unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert!(ckpt.self_contained);
    for (name, ad) in &adapters {
        let e = ckpt.entry(name).unwrap();
        assert_eq!(e.a_frozen.as_ref().unwrap(), ad.a_frozen());
        assert_eq!(e.b_frozen.as_ref().unwrap(), ad.b_frozen());
    }
}

#[test]
fn checkpoint_size_is_invariant_to_hidden_dimension() {
    // Same module count, rank and dtype across very different hidden sizes.
    let dir = TempDir::new().unwrap();
    let mut sizes = Vec::new();
    for (tag, n) in [(0u64, 8usize), (1, 64), (2, 512)] {
        let weights = base_weights(n, 4, 30 + tag);
        let adapters = adapters_for(&weights, 4, 40 + tag);
        let path = dir.path().join(format!("n{n}.lxsc"));
        save_checkpoint(&adapters, &SaveOptions::default(), &path).unwrap();
        sizes.push(fs::metadata(&path).unwrap().len());
    }
    assert_eq!(sizes[0], sizes[1]);
    assert_eq!(sizes[1], sizes[2]);
}

#[test]
fn warm_start_copies_latents_exactly() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("src.lxsc");
    let weights = base_weights(10, 2, 50);
    let source_adapters = adapters_for(&weights, 3, 51);
    save_checkpoint(&source_adapters, &SaveOptions::default(), &path).unwrap();
    let source = load_checkpoint(&path).unwrap();

    // Fresh targets on the same base, different latent init.
    let mut targets = adapters_for(&weights, 3, 52);
    warm_start(&mut targets, &source).unwrap();
    for (name, t) in &targets {
        assert_eq!(t.r_latent(), source_adapters[name].r_latent());
        // Frozen pair untouched (same base and seed family here, so compare
        // against a fresh rebuild from the target seed).
        let fresh = adapters_for(&weights, 3, 52);
        assert_eq!(t.a_frozen(), fresh[name].a_frozen());
    }
}

#[test]
fn warm_start_rank_mismatch_names_the_module() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("src.lxsc");
    let weights = base_weights(16, 1, 60);
    let source_adapters = adapters_for(&weights, 8, 61);
    save_checkpoint(&source_adapters, &SaveOptions::default(), &path).unwrap();
    let source = load_checkpoint(&path).unwrap();

    let mut targets = adapters_for(&weights, 16, 62);
    match warm_start(&mut targets, &source).unwrap_err() {
        Error::RankMismatch {
            module,
            source_rank,
            target_rank,
        } => {
            assert_eq!(module, "layer0");
            assert_eq!(source_rank, 8);
            assert_eq!(target_rank, 16);
        }
        other => panic!("expected rank mismatch, got {other}"),
    }
}

#[test]
fn warm_start_requires_source_entries() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("src.lxsc");
    let weights = base_weights(8, 1, 70);
    save_checkpoint(
        &adapters_for(&weights, 2, 71),
        &SaveOptions::default(),
        &path,
    )
    .unwrap();
    let source = load_checkpoint(&path).unwrap();

    let other_weights = base_weights(8, 2, 72);
    let mut targets = adapters_for(&other_weights, 2, 73);
    assert!(matches!(
        warm_start(&mut targets, &source),
        Err(Error::MissingModules { .. })
    ));
}

#[test]
fn dtype_overflow_is_a_serialization_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.lxsc");
    let weights = base_weights(6, 1, 80);
    let mut adapters = adapters_for(&weights, 2, 81);
    let mut r = adapters["layer0"].r_latent().clone();
    r.set(0, 0, 1e300);
    adapters.get_mut("layer0").unwrap().set_r_latent(r).unwrap();
    let err = save_checkpoint(
        &adapters,
        &SaveOptions {
            storage_dtype: StorageDtype::F32,
            ..SaveOptions::default()
        },
        &path,
    );
    assert!(matches!(err, Err(Error::DtypeOverflow { .. })));
}
