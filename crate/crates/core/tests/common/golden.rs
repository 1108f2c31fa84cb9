//! Golden model and dataset files.
//!
//! Models are regenerated from fixed seeds; the manifests are stored as-is
//! and blobs are pinned by an FNV-1a hash to keep the repository small.
//! Set `CAPSNET_UPDATE_GOLDEN=1` to rewrite them.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use capsnet_core::arch::Architecture;
use capsnet_core::model_io::{
    float_from_bytes, float_to_bytes, quantized_from_bytes, quantized_to_bytes, Dataset, Samples,
};
use capsnet_core::quantizer::quantize_model;
use capsnet_core::reference::FloatModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODEL_SEED: u64 = 7;
pub const CALIB_SEED: u64 = 11;

pub fn dir() -> PathBuf {
    // both crates live side by side under crates/
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn updating() -> bool {
    std::env::var_os("CAPSNET_UPDATE_GOLDEN").is_some_and(|v| v != "0")
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Manifest text and blob of the float and quantized versions of a preset.
pub fn build(name: &str) -> [(String, String, Vec<u8>); 2] {
    let arch = Architecture::preset(name).expect("preset");
    let model = FloatModel::random(arch.clone(), 0.1, MODEL_SEED).unwrap();
    let len = arch.input.h * arch.input.w * arch.input.c;
    let mut rng = ChaCha8Rng::seed_from_u64(CALIB_SEED);
    let calib: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..len).map(|_| rng.random::<f32>()).collect())
        .collect();
    let q = quantize_model(&model, &calib).unwrap();
    let (fm, fb) = float_to_bytes(&model).unwrap();
    let (qm, qb) = quantized_to_bytes(&q.model).unwrap();
    [
        (format!("{name}.f32.json"), fm, fb),
        (format!("{name}.q7.json"), qm, qb),
    ]
}

fn read_hashes() -> BTreeMap<String, u64> {
    let text = std::fs::read_to_string(dir().join("blobs.txt")).unwrap_or_default();
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once(' ')?;
            Some((k.to_string(), u64::from_str_radix(v, 16).ok()?))
        })
        .collect()
}

static HASH_FILE: Mutex<()> = Mutex::new(());

fn write_hash(key: &str, hash: u64) {
    let _guard = HASH_FILE.lock().unwrap_or_else(|e| e.into_inner());
    let mut all = read_hashes();
    all.insert(key.to_string(), hash);
    let text: String = all.iter().map(|(k, v)| format!("{k} {v:016x}\n")).collect();
    std::fs::write(dir().join("blobs.txt"), text).unwrap();
}

/// Checks one preset against its golden files, then round-trips the golden
/// manifests through load and save.
pub fn check_model(name: &str) -> Result<(), String> {
    let hashes = read_hashes();
    for (i, (file, manifest, blob)) in build(name).into_iter().enumerate() {
        let path = dir().join(&file);
        if updating() {
            std::fs::write(&path, &manifest).unwrap();
            write_hash(&file, fnv1a(&blob));
        }
        let golden = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if golden != manifest {
            return Err(format!("{file}: regenerated manifest differs from golden"));
        }
        match hashes.get(&file) {
            Some(&h) if h == fnv1a(&blob) => {}
            Some(_) => return Err(format!("{file}: blob hash differs from golden")),
            None if updating() => {}
            None => return Err(format!("{file}: no golden blob hash")),
        }
        let (m2, b2) = if i == 0 {
            float_to_bytes(&float_from_bytes(&golden, &blob).map_err(|e| e.to_string())?)
        } else {
            quantized_to_bytes(&quantized_from_bytes(&golden, &blob).map_err(|e| e.to_string())?)
        }
        .map_err(|e| e.to_string())?;
        if m2 != golden || b2 != blob {
            return Err(format!("{file}: load then save is not byte-identical"));
        }
    }
    Ok(())
}

pub fn tiny_datasets() -> [(&'static str, Dataset); 2] {
    let f = Dataset::new(
        2,
        2,
        1,
        Samples::F32(vec![0.0, 0.25, -0.5, 1.0, 0.125, 0.75, -1.0, 0.5, 3.5, -0.0, 0.1, 0.9]),
        vec![0, 1, 9],
    )
    .unwrap();
    let q = Dataset::new(
        1,
        3,
        2,
        Samples::I8(vec![-128, 127, 0, 1, -1, 64, 5, 6, 7, -8, 9, 10]),
        vec![3, 4],
    )
    .unwrap();
    [("tiny_f32.cpds", f), ("tiny_i8.cpds", q)]
}

pub fn check_datasets() -> Result<(), String> {
    for (file, d) in tiny_datasets() {
        let path = dir().join(file);
        if updating() {
            d.save(&path).unwrap();
        }
        let golden = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if golden != d.to_bytes() {
            return Err(format!("{file}: differs from golden"));
        }
        let loaded = Dataset::load(&path).map_err(|e| e.to_string())?;
        if loaded != d || loaded.to_bytes() != golden {
            return Err(format!("{file}: load then save is not byte-identical"));
        }
    }
    Ok(())
}
