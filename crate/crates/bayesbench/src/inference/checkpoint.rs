//! Posterior checkpoints: a binary parameter blob plus a JSON sidecar
//! describing architecture, hyperparameters, training curve, and data hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterVector;

use super::{
    DropoutPosterior, GaussianPrior, HmcChain, MeanFieldPosterior, Posterior, PosteriorKind,
    TrainingCurve,
};

const MAGIC: &[u8; 4] = b"BBPK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSidecar {
    pub kind: PosteriorKind,
    pub arch_id: String,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub inference_method: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    #[serde(default)]
    pub training_curve: Option<TrainingCurve>,
    #[serde(default)]
    pub dataset_manifest_sha256: Option<String>,
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read, path: &Path) -> Result<Vec<f64>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > (1 << 31) {
        return Err(Error::format(path.display().to_string(), "implausible vector length"));
    }
    let mut v = vec![0.0; len];
    for x in &mut v {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Ok(v)
}

/// Write `<base>.bin` (parameters) and `<base>.json` (sidecar); returns the
/// two paths.
pub fn save_posterior(
    base: &Path,
    posterior: &Posterior,
    sidecar: &PosteriorSidecar,
) -> Result<(PathBuf, PathBuf)> {
    let bin_path = base.with_extension("bin");
    let json_path = base.with_extension("json");
    let mut w = BufWriter::new(File::create(&bin_path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    match posterior {
        Posterior::MeanField(q) => {
            w.write_u8(0)?;
            write_vec(&mut w, &q.mu)?;
            write_vec(&mut w, &q.rho)?;
            w.write_f64::<LittleEndian>(q.prior.mean)?;
            w.write_f64::<LittleEndian>(q.prior.variance)?;
        }
        Posterior::Dropout(d) => {
            w.write_u8(1)?;
            write_vec(&mut w, d.weights.as_slice())?;
            w.write_f64::<LittleEndian>(d.dropout_rate)?;
            w.write_f64::<LittleEndian>(d.prior_precision)?;
        }
        Posterior::HmcChain(c) => {
            w.write_u8(2)?;
            w.write_u64::<LittleEndian>(c.samples.len() as u64)?;
            for s in &c.samples {
                write_vec(&mut w, s.as_slice())?;
            }
            w.write_u64::<LittleEndian>(c.burn_in as u64)?;
            w.write_u64::<LittleEndian>(c.leapfrog_steps as u64)?;
            w.write_f64::<LittleEndian>(c.step_size)?;
            w.write_f64::<LittleEndian>(c.acceptance_rate)?;
        }
        Posterior::PointMass(p) => {
            w.write_u8(3)?;
            write_vec(&mut w, p.as_slice())?;
        }
    }
    w.flush()?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(&json_path)?), sidecar)?;
    Ok((bin_path, json_path))
}

/// Load a posterior checkpoint saved by [`save_posterior`]; `base` may be
/// the bare path or either of the two files.
pub fn load_posterior(base: &Path) -> Result<(Posterior, PosteriorSidecar)> {
    let bin_path = base.with_extension("bin");
    let json_path = base.with_extension("json");
    let mut r = BufReader::new(File::open(&bin_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(
            bin_path.display().to_string(),
            format!("expected checkpoint magic {MAGIC:?}, found {magic:?}"),
        ));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(
            bin_path.display().to_string(),
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let kind = r.read_u8()?;
    let posterior = match kind {
        0 => {
            let mu = read_vec(&mut r, &bin_path)?;
            let rho = read_vec(&mut r, &bin_path)?;
            let mean = r.read_f64::<LittleEndian>()?;
            let variance = r.read_f64::<LittleEndian>()?;
            Posterior::MeanField(MeanFieldPosterior::new(
                mu,
                rho,
                GaussianPrior { mean, variance },
            )?)
        }
        1 => {
            let weights = read_vec(&mut r, &bin_path)?;
            let rate = r.read_f64::<LittleEndian>()?;
            let precision = r.read_f64::<LittleEndian>()?;
            Posterior::Dropout(DropoutPosterior::new(
                ParameterVector::new(weights),
                rate,
                precision,
            )?)
        }
        2 => {
            let n = r.read_u64::<LittleEndian>()? as usize;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                samples.push(ParameterVector::new(read_vec(&mut r, &bin_path)?));
            }
            let burn_in = r.read_u64::<LittleEndian>()? as usize;
            let leapfrog_steps = r.read_u64::<LittleEndian>()? as usize;
            let step_size = r.read_f64::<LittleEndian>()?;
            let acceptance_rate = r.read_f64::<LittleEndian>()?;
            Posterior::HmcChain(HmcChain {
                samples,
                burn_in,
                leapfrog_steps,
                step_size,
                acceptance_rate,
            })
        }
        3 => Posterior::PointMass(ParameterVector::new(read_vec(&mut r, &bin_path)?)),
        other => {
            return Err(Error::format(
                bin_path.display().to_string(),
                format!("unknown posterior kind tag {other}"),
            ))
        }
    };
    let sidecar: PosteriorSidecar =
        serde_json::from_reader(BufReader::new(File::open(&json_path)?))?;
    Ok((posterior, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar(kind: PosteriorKind) -> PosteriorSidecar {
        PosteriorSidecar {
            kind,
            arch_id: "mlp:h=4".into(),
            num_classes: 2,
            input_shape: (1, 1, 2),
            inference_method: kind.to_string(),
            seed: 3,
            hyperparameters: serde_json::json!({"lr": 0.05}),
            training_curve: None,
            dataset_manifest_sha256: Some("abc".into()),
        }
    }

    #[test]
    fn roundtrip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let posteriors = vec![
            Posterior::MeanField(MeanFieldPosterior {
                mu: vec![1.0, 2.0],
                rho: vec![-3.0, 0.5],
                prior: GaussianPrior::standard(),
            }),
            Posterior::Dropout(
                DropoutPosterior::new(ParameterVector::new(vec![0.1, -0.2]), 0.1, 1e-4).unwrap(),
            ),
            Posterior::HmcChain(HmcChain {
                samples: vec![
                    ParameterVector::new(vec![1.0, 2.0]),
                    ParameterVector::new(vec![3.0, 4.0]),
                ],
                burn_in: 5,
                leapfrog_steps: 7,
                step_size: 0.01,
                acceptance_rate: 0.9,
            }),
            Posterior::PointMass(ParameterVector::new(vec![9.0, -9.0])),
        ];
        for (i, p) in posteriors.iter().enumerate() {
            let base = dir.path().join(format!("ckpt{i}"));
            save_posterior(&base, p, &sidecar(p.kind())).unwrap();
            let (back, side) = load_posterior(&base).unwrap();
            assert_eq!(back.kind(), p.kind());
            assert_eq!(side.kind, p.kind());
            let a = back.draw(11);
            let b = p.draw(11);
            assert_eq!(a.params, b.params);
        }
    }
}
