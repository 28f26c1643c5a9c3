//! Gaussian class clusters with a controllable fraction of radially displaced outliers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::featstore::{ClassEntry, FeatureBank, FeatureRecord, Split, SplitManifest};
use crate::numerics::RngStream;

const SYNTH_STREAM: u64 = 0x5917;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub cluster_std: f64,
    /// Centers are uniform in `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    pub outlier_frac: f64,
    /// Extra radial distance added to an outlier's own noise vector.
    pub outlier_offset: f64,
    /// Number of classes assigned to (base, val, novel), in class-id order.
    pub split_counts: (usize, usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The desk-scale benchmark.
    fn default() -> Self {
        SynthSpec {
            n_classes: 20,
            dim: 64,
            per_class: 200,
            cluster_std: 1.0,
            center_scale: 0.85,
            outlier_frac: 0.3,
            outlier_offset: 6.0,
            split_counts: (9, 2, 9),
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn outliers_per_class(&self) -> usize {
        (self.outlier_frac * self.per_class as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.dim == 0 {
            return bad("n_classes and dim must be positive".into());
        }
        if self.per_class < 2 {
            return bad(format!(
                "per_class must be at least 2, got {}",
                self.per_class
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return bad(format!(
                "outlier_frac must lie in [0, 1), got {}",
                self.outlier_frac
            ));
        }
        if self.outliers_per_class() >= self.per_class {
            return bad("outlier_frac leaves no clean sample per class".into());
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return bad(format!(
                "cluster_std must be positive, got {}",
                self.cluster_std
            ));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return bad(format!(
                "center_scale must be non-negative, got {}",
                self.center_scale
            ));
        }
        if !(self.outlier_offset >= 0.0 && self.outlier_offset.is_finite()) {
            return bad(format!(
                "outlier_offset must be non-negative, got {}",
                self.outlier_offset
            ));
        }
        let (b, v, n) = self.split_counts;
        if b + v + n != self.n_classes {
            return bad(format!(
                "split counts {b}+{v}+{n} do not cover {} classes",
                self.n_classes
            ));
        }
        Ok(())
    }

    pub fn split_of(&self, class_id: usize) -> Split {
        let (b, v, _) = self.split_counts;
        if class_id < b {
            Split::Base
        } else if class_id < b + v {
            Split::Val
        } else {
            Split::Novel
        }
    }

    pub fn describe(&self) -> String {
        let (b, v, n) = self.split_counts;
        format!(
            "synthetic gaussian clusters: classes={} dim={} per_class={} cluster_std={} center_scale={} \
             outlier_frac={} outlier_offset={} split={b}/{v}/{n} seed={}",
            self.n_classes,
            self.dim,
            self.per_class,
            self.cluster_std,
            self.center_scale,
            self.outlier_frac,
            self.outlier_offset,
            self.seed
        )
    }
}

/// Generated bank plus ground truth kept out of the bank itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBank {
    pub bank: FeatureBank,
    pub centers: Vec<Vec<f64>>,
    /// Parallel to `bank.records`.
    pub outlier: Vec<bool>,
}

/// Per class: center uniform in the cube; clean samples are `center + n` with
/// `n ~ N(0, std² I)`; outliers are `center + n + offset · n/‖n‖`, i.e. a clean draw pushed
/// outward along its own (uniformly random) direction.
pub fn generate(spec: &SynthSpec) -> Result<SynthBank> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, SYNTH_STREAM);
    let n_out = spec.outliers_per_class();
    let mut records = Vec::with_capacity(spec.n_classes * spec.per_class);
    let mut centers = Vec::with_capacity(spec.n_classes);
    let mut outlier = Vec::with_capacity(spec.n_classes * spec.per_class);

    for c in 0..spec.n_classes {
        let mut rng = root.child(c as u64);
        let center: Vec<f64> = (0..spec.dim)
            .map(|_| rng.uniform(-spec.center_scale, spec.center_scale))
            .collect();
        let mut is_out = vec![false; spec.per_class];
        for i in rng.sample_indices(spec.per_class, n_out) {
            is_out[i] = true;
        }
        for &out in &is_out {
            let noise: Vec<f64> = (0..spec.dim)
                .map(|_| spec.cluster_std * rng.normal())
                .collect();
            let push = if out {
                let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    spec.outlier_offset / norm
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let vector = center
                .iter()
                .zip(&noise)
                .map(|(m, n)| (m + n * (1.0 + push)) as f32)
                .collect();
            records.push(FeatureRecord {
                class_id: c as u32,
                vector,
            });
            outlier.push(out);
        }
        centers.push(center);
    }

    let manifest = SplitManifest {
        provenance: spec.describe(),
        classes: (0..spec.n_classes)
            .map(|c| {
                (
                    c as u32,
                    ClassEntry {
                        name: format!("class_{c:03}"),
                        split: spec.split_of(c),
                    },
                )
            })
            .collect(),
    };
    Ok(SynthBank {
        bank: FeatureBank::new(spec.dim, records, manifest)?,
        centers,
        outlier,
    })
}

pub fn oracle_path(bank_path: &Path) -> PathBuf {
    bank_path.with_extension("oracle.txt")
}

/// Text sidecar: `center,<class>,<v...>` per class then `record,<index>,<class>,<0|1>` per record.
pub fn format_oracle(synth: &SynthBank) -> String {
    let mut out = String::new();
    for (c, center) in synth.centers.iter().enumerate() {
        write!(out, "center,{c}").unwrap();
        for v in center {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    for (i, (rec, out_flag)) in synth.bank.records.iter().zip(&synth.outlier).enumerate() {
        writeln!(out, "record,{i},{},{}", rec.class_id, u8::from(*out_flag)).unwrap();
    }
    out
}

pub fn write_oracle(synth: &SynthBank, path: &Path) -> Result<()> {
    fs::write(path, format_oracle(synth)).map_err(|e| Error::io(path, e))
}

/// Parses an oracle sidecar back into (centers, outlier flags).
pub fn read_oracle(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut centers = Vec::new();
    let mut flags = Vec::new();
    let bad = |l: &str| Error::Config(format!("malformed oracle line {l:?}"));
    for line in text.lines().filter(|l| !l.is_empty()) {
        let mut parts = line.split(',');
        match parts.next() {
            Some("center") => {
                parts.next().ok_or_else(|| bad(line))?;
                let v = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad(line)))
                    .collect::<Result<Vec<_>>>()?;
                centers.push(v);
            }
            Some("record") => {
                let flag = parts.nth(2).ok_or_else(|| bad(line))?;
                flags.push(flag == "1");
            }
            _ => return Err(bad(line)),
        }
    }
    Ok((centers, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featstore::encode_bank;
    use crate::numerics::euclidean;

    #[test]
    fn clean_means_track_centers() {
        let spec = SynthSpec {
            n_classes: 3,
            dim: 16,
            per_class: 500,
            outlier_frac: 0.0,
            split_counts: (1, 1, 1),
            ..SynthSpec::default()
        };
        let s = generate(&spec).unwrap();
        let tol = 4.0 * spec.cluster_std / (spec.per_class as f64).sqrt();
        for c in 0..3u32 {
            let members: Vec<&Vec<f32>> = s
                .bank
                .records
                .iter()
                .filter(|r| r.class_id == c)
                .map(|r| &r.vector)
                .collect();
            for d in 0..spec.dim {
                let mean = members.iter().map(|v| v[d] as f64).sum::<f64>() / members.len() as f64;
                assert!((mean - s.centers[c as usize][d]).abs() < tol);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec::default();
        let a = encode_bank(&generate(&spec).unwrap().bank).unwrap();
        let b = encode_bank(&generate(&spec).unwrap().bank).unwrap();
        assert_eq!(a, b);
        let c = encode_bank(&generate(&SynthSpec { seed: 2, ..spec }).unwrap().bank).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn far_outliers_separate_from_clean() {
        let spec = SynthSpec {
            outlier_offset: 10.0,
            ..SynthSpec::default()
        };
        let s = generate(&spec).unwrap();
        let mut max_clean = 0.0f64;
        let mut min_out = f64::INFINITY;
        for (rec, &out) in s.bank.records.iter().zip(&s.outlier) {
            let v: Vec<f64> = rec.vector.iter().map(|&x| x as f64).collect();
            let d = euclidean(&v, &s.centers[rec.class_id as usize]).unwrap();
            if out {
                min_out = min_out.min(d);
            } else {
                max_clean = max_clean.max(d);
            }
        }
        assert!(
            min_out > max_clean + 2.0,
            "min outlier {min_out}, max clean {max_clean}"
        );
    }

    #[test]
    fn exact_outlier_count() {
        let spec = SynthSpec {
            per_class: 37,
            ..SynthSpec::default()
        };
        let s = generate(&spec).unwrap();
        for c in 0..spec.n_classes as u32 {
            let n = s
                .bank
                .records
                .iter()
                .zip(&s.outlier)
                .filter(|(r, &o)| r.class_id == c && o)
                .count();
            assert_eq!(n, (0.3f64 * 37.0).round() as usize);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SynthSpec::default();
        for bad in [
            SynthSpec {
                per_class: 1,
                ..base.clone()
            },
            SynthSpec {
                outlier_frac: 1.0,
                ..base.clone()
            },
            SynthSpec {
                per_class: 2,
                outlier_frac: 0.9,
                ..base.clone()
            },
            SynthSpec {
                cluster_std: 0.0,
                ..base.clone()
            },
            SynthSpec {
                split_counts: (1, 1, 1),
                ..base.clone()
            },
        ] {
            assert!(generate(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn oracle_round_trip_and_no_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_classes: 4,
            per_class: 10,
            split_counts: (2, 1, 1),
            ..SynthSpec::default()
        };
        let s = generate(&spec).unwrap();
        let path = dir.path().join("o.oracle.txt");
        write_oracle(&s, &path).unwrap();
        let (centers, flags) = read_oracle(&path).unwrap();
        assert_eq!(centers, s.centers);
        assert_eq!(flags, s.outlier);
        // bank bytes do not depend on the ground truth beyond the samples themselves
        let bytes = encode_bank(&s.bank).unwrap();
        assert_eq!(bytes.len(), 24 + 40 * (4 + 4 * 64));
    }
}
