//! Synthetic patient-grouped cohorts and the PNDS1 dataset file.
//!
//! PNDS1 layout (little-endian):
//!
//! ```text
//! "PNDS1"            5 bytes: format tag, last byte is the version
//! samples            u64
//! positives          u64
//! negatives          u64
//! feature width      u32
//! patients           u64
//! seed               u64
//! separation         f64
//! pos_ratio          f64
//! noise              f64
//! per sample:
//!   patient id       u32 length + UTF-8
//!   label            u8 (0 or 1)
//!   features         width × f64
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{put_f64, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, FormatError, Result};
use crate::model::seeded_stream;

const TAG: &[u8; 4] = b"PNDS";
const VERSION: u8 = b'1';

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub features: Vec<f64>,
    /// 1 = diseased.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub separation: f64,
    pub pos_ratio: f64,
    pub noise: f64,
    pub patients: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Subset by sample index, keeping the metadata of the parent.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let samples: Vec<Sample> = ids.iter().map(|&i| self.samples[i].clone()).collect();
        let positives = samples.iter().filter(|s| s.label == 1).count();
        Dataset {
            meta: DatasetMeta {
                positives,
                negatives: samples.len() - positives,
                ..self.meta.clone()
            },
            samples,
        }
    }

    /// CSV with header `patient_id,label,f0..fk`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,label");
        for k in 0..self.feature_width() {
            write!(out, ",f{k}").unwrap();
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{},{}", s.patient_id, s.label).unwrap();
            for v in &s.features {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub samples: usize,
    pub pos_ratio: f64,
    /// Distance between the two class means in the latent plane.
    pub separation: f64,
    pub patients: usize,
    pub feature_width: usize,
    /// Standard deviation of the isotropic noise added after lifting.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            samples: 630,
            pos_ratio: 401.0 / 630.0,
            separation: 4.0,
            patients: 210,
            feature_width: 32,
            noise: 0.1,
            seed: 7,
        }
    }
}

pub fn generate_synthetic(params: &SynthParams) -> Result<Dataset> {
    generate_with_latents(params).map(|(ds, _)| ds)
}

/// Like [`generate_synthetic`], also returning each sample's 2-D latent.
///
/// Latents are `N(±separation/2 · e₀, I)` by class. Features are a fixed
/// random linear lift of the latent plus isotropic noise. Patients are
/// single-class; samples of a class are dealt round-robin to that class's
/// patients.
pub fn generate_with_latents(params: &SynthParams) -> Result<(Dataset, Vec<[f64; 2]>)> {
    let p = params;
    let bad = |msg: String| Err(Error::Config(msg));
    if !(p.pos_ratio > 0.0 && p.pos_ratio < 1.0) {
        return bad(format!("pos_ratio must lie in (0, 1), got {}", p.pos_ratio));
    }
    if !(p.separation >= 0.0 && p.separation.is_finite()) {
        return bad(format!("separation must be finite and >= 0, got {}", p.separation));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return bad(format!("noise must be finite and >= 0, got {}", p.noise));
    }
    if p.feature_width == 0 {
        return bad("feature width must be positive".into());
    }
    if p.patients < 2 || p.patients > p.samples {
        return bad(format!(
            "need 2 <= patients <= samples, got {} patients for {} samples",
            p.patients, p.samples
        ));
    }
    let positives = (p.samples as f64 * p.pos_ratio).round() as usize;
    let negatives = p.samples - positives;
    if positives == 0 || negatives == 0 {
        return bad(format!(
            "pos_ratio {} leaves an empty class at {} samples",
            p.pos_ratio, p.samples
        ));
    }
    let pos_patients = ((p.patients as f64 * positives as f64 / p.samples as f64).round() as usize)
        .clamp(1, p.patients - 1)
        .min(positives);
    let neg_patients = p.patients - pos_patients;
    if neg_patients > negatives {
        return bad(format!(
            "{neg_patients} negative patients but only {negatives} negative samples"
        ));
    }

    let mut lift_rng = seeded_stream(p.seed, 0);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let lift: Vec<[f64; 2]> = (0..p.feature_width)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut lift_rng);
            let b: f64 = StandardNormal.sample(&mut lift_rng);
            [a * scale, b * scale]
        })
        .collect();

    let mut names: Vec<usize> = (0..p.patients).collect();
    names.shuffle(&mut seeded_stream(p.seed, 1));

    let mut rng = seeded_stream(p.seed, 2);
    let half = p.separation / 2.0;
    let mut rows = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let (label, patient) = if i < positives {
            (1u8, i % pos_patients)
        } else {
            (0u8, pos_patients + (i - positives) % neg_patients)
        };
        let center = if label == 1 { half } else { -half };
        let g: f64 = StandardNormal.sample(&mut rng);
        let z0 = center + g;
        let z1: f64 = StandardNormal.sample(&mut rng);
        let features = lift
            .iter()
            .map(|[a, b]| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                a * z0 + b * z1 + p.noise * eps
            })
            .collect();
        rows.push((
            Sample {
                patient_id: format!("P{:04}", names[patient]),
                features,
                label,
            },
            [z0, z1],
        ));
    }
    rows.shuffle(&mut seeded_stream(p.seed, 3));
    let (samples, latents): (Vec<Sample>, Vec<[f64; 2]>) = rows.into_iter().unzip();
    Ok((
        Dataset {
            samples,
            meta: DatasetMeta {
                seed: p.seed,
                separation: p.separation,
                pos_ratio: p.pos_ratio,
                noise: p.noise,
                patients: p.patients,
                positives,
                negatives,
            },
        },
        latents,
    ))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let width = ds.feature_width();
    let mut out = Vec::with_capacity(64 + ds.len() * (16 + 8 * width));
    out.extend_from_slice(TAG);
    out.push(VERSION);
    put_u64(&mut out, ds.len() as u64);
    put_u64(&mut out, ds.meta.positives as u64);
    put_u64(&mut out, ds.meta.negatives as u64);
    put_u32(&mut out, width as u32);
    put_u64(&mut out, ds.meta.patients as u64);
    put_u64(&mut out, ds.meta.seed);
    put_f64(&mut out, ds.meta.separation);
    put_f64(&mut out, ds.meta.pos_ratio);
    put_f64(&mut out, ds.meta.noise);
    for s in &ds.samples {
        put_string(&mut out, &s.patient_id);
        out.push(s.label);
        for &v in &s.features {
            put_f64(&mut out, v);
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    let tag = r.bytes(4, "format tag").map_err(|_| FormatError::BadMagic { expected: "PNDS1" })?;
    if tag != TAG {
        return Err(FormatError::BadMagic { expected: "PNDS1" }.into());
    }
    let version = r.u8("format version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            found: version.wrapping_sub(b'0') as u32,
            expected: 1,
        }
        .into());
    }
    let count = r.u64("sample count")? as usize;
    let positives = r.u64("positive count")? as usize;
    let negatives = r.u64("negative count")? as usize;
    let width = r.u32("feature width")? as usize;
    let meta = DatasetMeta {
        patients: r.u64("patient count")? as usize,
        seed: r.u64("seed")?,
        separation: r.f64("separation")?,
        pos_ratio: r.f64("pos_ratio")?,
        noise: r.f64("noise")?,
        positives,
        negatives,
    };
    if positives + negatives != count {
        return Err(FormatError::Corrupt(format!(
            "class counts {positives} + {negatives} != {count} samples"
        ))
        .into());
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let patient_id = r.string("patient id")?;
        if patient_id.is_empty() {
            return Err(FormatError::Corrupt("empty patient id".into()).into());
        }
        let label = r.u8("label")?;
        if label > 1 {
            return Err(FormatError::Corrupt(format!("label byte {label}")).into());
        }
        let mut features = Vec::with_capacity(width);
        for _ in 0..width {
            let v = r.f64("features")?;
            if !v.is_finite() {
                return Err(FormatError::Corrupt(format!("non-finite feature in {patient_id}")).into());
            }
            features.push(v);
        }
        samples.push(Sample {
            patient_id,
            features,
            label,
        });
    }
    if !r.is_at_end() {
        return Err(FormatError::Corrupt("trailing bytes after last sample".into()).into());
    }
    let ds = Dataset { samples, meta };
    if ds.positives() != positives {
        return Err(FormatError::Corrupt(format!(
            "header says {positives} positives, records hold {}",
            ds.positives()
        ))
        .into());
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Draws `len` standard-normal values; used by tests and fixtures.
pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn cohort_counts() {
        let ds = generate_synthetic(&SynthParams::default()).unwrap();
        assert_eq!(ds.len(), 630);
        assert_eq!(ds.positives(), 401);
        assert_eq!(ds.meta.positives, 401);
        assert_eq!(ds.meta.negatives, 229);
    }

    #[test]
    fn patients_are_single_class() {
        let ds = generate_synthetic(&SynthParams::default()).unwrap();
        let mut labels: HashMap<&str, u8> = HashMap::new();
        for s in &ds.samples {
            let l = *labels.entry(&s.patient_id).or_insert(s.label);
            assert_eq!(l, s.label, "{}", s.patient_id);
        }
        assert_eq!(labels.len(), 210);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams::default();
        assert_eq!(generate_synthetic(&p).unwrap(), generate_synthetic(&p).unwrap());
        let q = SynthParams { seed: 8, ..p.clone() };
        assert_ne!(generate_synthetic(&p).unwrap(), generate_synthetic(&q).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        for p in [
            SynthParams { pos_ratio: 0.0, ..Default::default() },
            SynthParams { pos_ratio: 1.0, ..Default::default() },
            SynthParams { separation: -1.0, ..Default::default() },
            SynthParams { patients: 631, ..Default::default() },
            SynthParams { patients: 1, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic(&p), Err(Error::Config(_))), "{p:?}");
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = generate_synthetic(&SynthParams { samples: 40, patients: 10, ..Default::default() }).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncation_is_an_error() {
        let ds = generate_synthetic(&SynthParams { samples: 10, patients: 4, ..Default::default() }).unwrap();
        let bytes = encode_dataset(&ds);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_dataset(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Format(FormatError::Truncated(_)) | Error::Format(FormatError::BadMagic { .. })),
                "cut {cut}: {err}"
            );
        }
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let ds = generate_synthetic(&SynthParams { samples: 10, patients: 4, ..Default::default() }).unwrap();
        let mut bytes = encode_dataset(&ds);
        bytes[4] = b'2';
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format(FormatError::Version { found: 2, expected: 1 }))
        ));
        bytes[0] = b'Q';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format(FormatError::BadMagic { .. }))));
    }

    #[test]
    fn hand_encoded_single_sample() {
        let mut bytes = b"PNDS1".to_vec();
        bytes.extend_from_slice(&1u64.to_le_bytes()); // samples
        bytes.extend_from_slice(&1u64.to_le_bytes()); // positives
        bytes.extend_from_slice(&0u64.to_le_bytes()); // negatives
        bytes.extend_from_slice(&2u32.to_le_bytes()); // width
        bytes.extend_from_slice(&1u64.to_le_bytes()); // patients
        bytes.extend_from_slice(&42u64.to_le_bytes()); // seed
        bytes.extend_from_slice(&1.5f64.to_le_bytes()); // separation
        bytes.extend_from_slice(&0.5f64.to_le_bytes()); // pos_ratio
        bytes.extend_from_slice(&0.0f64.to_le_bytes()); // noise
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"AB");
        bytes.push(1);
        bytes.extend_from_slice(&(-0.25f64).to_le_bytes());
        bytes.extend_from_slice(&3.0f64.to_le_bytes());

        let ds = decode_dataset(&bytes).unwrap();
        assert_eq!(ds.samples, vec![Sample { patient_id: "AB".into(), features: vec![-0.25, 3.0], label: 1 }]);
        assert_eq!(ds.meta.seed, 42);
        assert_eq!(ds.meta.separation, 1.5);
        assert_eq!(encode_dataset(&ds), bytes);
    }

    #[test]
    fn csv_export() {
        let ds = Dataset {
            samples: vec![Sample { patient_id: "P1".into(), features: vec![0.5, -2.0], label: 0 }],
            meta: DatasetMeta { seed: 0, separation: 0.0, pos_ratio: 0.5, noise: 0.0, patients: 1, positives: 0, negatives: 1 },
        };
        assert_eq!(ds.to_csv(), "patient_id,label,f0,f1\nP1,0,0.5,-2\n");
    }
}
