//! Round trips and corruption cases for the binary formats.

use std::path::Path;

use etp::io::checkpoint::{decode_checkpoint, encode_checkpoint, rn_from_checkpoint, ModelKind};
use etp::io::features::{decode_feature_file, encode_feature_file, FeatureKind};
use etp::refinement::{train_rn, RegressionTarget, RnConfig, RnModel, RnSample, RnTrainConfig};
use etp::tensor::{LrSchedule, Module, Tensor};
use rand::RngExt;

use super::oracles::iv;
use super::rng;

pub type Case = Result<(), String>;

fn expect_err<T>(what: &str, r: etp::Result<T>, needle: &str) -> Case {
    match r {
        Ok(_) => Err(format!("{what}: accepted")),
        Err(e) if e.to_string().contains(needle) => Ok(()),
        Err(e) => Err(format!("{what}: expected `{needle}`, got `{e}`")),
    }
}

fn le(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// A matrix whose entries are exactly representable in 32 bits.
pub fn f32_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols)
        .map(|_| r.random_range(-1e3f32..1e3f32) as f64)
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Writes the header and payload by hand and compares with the encoder.
pub fn feature_layout_by_hand() -> Case {
    let m = f32_matrix(3, 2, 9);
    let mut expected = b"ETPF".to_vec();
    expected.extend(le(&[1, 0, 3, 2]));
    for v in m.data() {
        expected.extend((*v as f32).to_le_bytes());
    }
    let got = encode_feature_file(&m, FeatureKind::Features).map_err(|e| e.to_string())?;
    if got != expected {
        return Err("encoder layout differs from the documented layout".into());
    }
    Ok(())
}

pub fn feature_round_trips() -> Case {
    for seed in 0..20 {
        let m = f32_matrix(100, 64, seed);
        let bytes = encode_feature_file(&m, FeatureKind::Features).map_err(|e| e.to_string())?;
        let (kind, back) = decode_feature_file(&bytes, Path::new("f.etpf")).map_err(|e| e.to_string())?;
        let same_bits = back
            .data()
            .iter()
            .zip(m.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if kind != FeatureKind::Features || back.shape() != m.shape() || !same_bits {
            return Err(format!("seed {seed}: round trip altered the matrix"));
        }
        if encode_feature_file(&back, kind).map_err(|e| e.to_string())? != bytes {
            return Err(format!("seed {seed}: re-encoding changed the bytes"));
        }
    }
    let one = Tensor::row_vector(vec![0.5]);
    let bytes = encode_feature_file(&one, FeatureKind::Scores).map_err(|e| e.to_string())?;
    let (_, back) = decode_feature_file(&bytes, Path::new("s.etpf")).map_err(|e| e.to_string())?;
    if back.data() != [0.5] || bytes.len() != 24 {
        return Err("1x1 score file did not round trip".into());
    }
    Ok(())
}

pub fn feature_corruptions() -> Case {
    let p = Path::new("f.etpf");
    let good = encode_feature_file(&f32_matrix(4, 3, 1), FeatureKind::Features).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    expect_err("bad magic", decode_feature_file(&bad, p), "bad magic")?;

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    expect_err("version 2", decode_feature_file(&bad, p), "unsupported version")?;

    expect_err(
        "truncated payload",
        decode_feature_file(&good[..good.len() - 1], p),
        "size mismatch",
    )?;
    expect_err("truncated header", decode_feature_file(&good[..10], p), "size mismatch")?;
    let mut long = good.clone();
    long.extend([0, 0, 0, 0]);
    expect_err("extra payload", decode_feature_file(&long, p), "size mismatch")?;

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&7u32.to_le_bytes());
    expect_err("unknown kind", decode_feature_file(&bad, p), "unknown kind")?;

    let mut scores = b"ETPF".to_vec();
    scores.extend(le(&[1, 1, 1, 2]));
    scores.extend(0.25f32.to_le_bytes());
    scores.extend(1.5f32.to_le_bytes());
    expect_err("score above 1", decode_feature_file(&scores, p), "outside [0,1]")?;
    expect_err(
        "writing a score below 0",
        encode_feature_file(&Tensor::row_vector(vec![-0.1]), FeatureKind::Scores),
        "outside [0,1]",
    )
}

fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend(crc.to_le_bytes());
    body
}

fn trained_rn() -> RnModel {
    let mut r = rng(4);
    let mut model = RnModel::new(
        &RnConfig {
            input_dim: 3,
            hidden: 5,
            depth: 2,
        },
        &mut r,
    );
    let samples: Vec<RnSample> = (0..6)
        .map(|i| RnSample {
            anchor: iv(10 * i, 10 * i + 16),
            units: Tensor::uniform(&[1 + i % 3, 3], 1.0, &mut r),
            target: RegressionTarget::new(r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)),
        })
        .collect();
    let cfg = RnTrainConfig {
        batch_size: 3,
        iterations: 20,
        momentum: 0.9,
        schedule: LrSchedule {
            base: 0.05,
            decay: 0.1,
            every: 100,
            floor: None,
        },
        seed: 1,
    };
    train_rn(&mut model, &samples, &cfg).unwrap();
    model
}

pub fn checkpoint_round_trips() -> Case {
    let p = Path::new("m.etpm");
    let empty = encode_checkpoint(ModelKind::Refinement, &[]).map_err(|e| e.to_string())?;
    if empty != with_crc([b"ETPM".to_vec(), le(&[1, 0, 0])].concat()) {
        return Err("empty checkpoint layout differs".into());
    }
    decode_checkpoint(&empty, p).map_err(|e| e.to_string())?;

    let model = trained_rn();
    let bytes = encode_checkpoint(ModelKind::Refinement, &model.params()).map_err(|e| e.to_string())?;
    let ck = decode_checkpoint(&bytes, p).map_err(|e| e.to_string())?;
    for (a, b) in ck.params.iter().zip(model.params()) {
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if a.name != b.name || a.value.shape() != b.value.shape() || !same {
            return Err(format!("parameter `{}` changed", b.name));
        }
    }
    let restored = rn_from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let units = Tensor::uniform(&[4, 3], 1.0, &mut rng(11));
    let (a, b) = (model.predict(&units).unwrap(), restored.predict(&units).unwrap());
    if a.c.to_bits() != b.c.to_bits() || a.s.to_bits() != b.s.to_bits() {
        return Err("restored model predicts differently".into());
    }
    Ok(())
}

pub fn checkpoint_corruptions() -> Case {
    let p = Path::new("m.etpm");
    let model = trained_rn();
    let good = encode_checkpoint(ModelKind::Refinement, &model.params()).unwrap();

    let mut bad = good.clone();
    let mid = good.len() / 2;
    bad[mid] ^= 0x01;
    expect_err("flipped payload byte", decode_checkpoint(&bad, p), "CRC mismatch")?;

    let mut bad = good.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x80;
    expect_err("flipped CRC byte", decode_checkpoint(&bad, p), "CRC mismatch")?;

    expect_err(
        "truncated",
        decode_checkpoint(&good[..good.len() - 9], p),
        "CRC mismatch",
    )?;
    expect_err("too short", decode_checkpoint(&good[..12], p), "truncated")?;

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"ETPF");
    expect_err("bad magic", decode_checkpoint(&bad, p), "bad magic")?;

    let body = [b"ETPM".to_vec(), le(&[2, 0, 0])].concat();
    expect_err(
        "version 2",
        decode_checkpoint(&with_crc(body), p),
        "unsupported version",
    )?;

    let body = [b"ETPM".to_vec(), le(&[1, 9, 0])].concat();
    expect_err(
        "unknown kind",
        decode_checkpoint(&with_crc(body), p),
        "unknown model kind",
    )?;

    let entry = [le(&[1]), b"w".to_vec(), le(&[1, 1]), 2.0f64.to_le_bytes().to_vec()].concat();
    let body = [b"ETPM".to_vec(), le(&[1, 0, 2]), entry.clone(), entry].concat();
    expect_err(
        "duplicate names",
        decode_checkpoint(&with_crc(body), p),
        "duplicate parameter name",
    )?;

    let entry = [le(&[1]), b"w".to_vec(), le(&[1, 2]), 2.0f64.to_le_bytes().to_vec()].concat();
    let body = [b"ETPM".to_vec(), le(&[1, 0, 1]), entry].concat();
    expect_err(
        "short parameter payload",
        decode_checkpoint(&with_crc(body), p),
        "truncated",
    )?;

    let body = [b"ETPM".to_vec(), le(&[1, 0, 0]), vec![0u8; 3]].concat();
    expect_err(
        "trailing bytes",
        decode_checkpoint(&with_crc(body), p),
        "trailing bytes",
    )
}

pub type Named = (&'static str, fn() -> Case);

pub const ALL: [Named; 5] = [
    ("feature layout", feature_layout_by_hand),
    ("feature round trips", feature_round_trips),
    ("feature corruptions", feature_corruptions),
    ("checkpoint round trips", checkpoint_round_trips),
    ("checkpoint corruptions", checkpoint_corruptions),
];
