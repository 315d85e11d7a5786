//! On-disk formats shared with the CLI: eigenbasis CSV + JSON sidecar,
//! univariate FPCA serialization, posterior-sample directories, and
//! generic curve tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bases::EigenBasis;
use crate::fitter::samples::{BlockDraws, PosteriorSamples};
use crate::gfpca::UnivariateFpca;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct EigenBasisMeta {
    level: usize,
    eigenvalues: Vec<f64>,
    weights: Vec<f64>,
}

/// Write a set of eigenbases as `level,m,dim,t,value` CSV plus a JSON
/// sidecar carrying eigenvalues and scalar-product weights.
pub fn write_eigenbasis_set(
    bases: &[EigenBasis],
    csv_path: &Path,
    json_path: &Path,
) -> Result<(), IoError> {
    let mut out = String::from("level,m,dim,t,value\n");
    for basis in bases {
        for m in 0..basis.n_components() {
            for dim in 0..basis.n_dims() {
                for (g, &t) in basis.grid.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        basis.level,
                        m + 1,
                        dim + 1,
                        t,
                        basis.psi[dim][(g, m)]
                    );
                }
            }
        }
    }
    std::fs::write(csv_path, out)?;
    let meta: Vec<EigenBasisMeta> = bases
        .iter()
        .map(|b| EigenBasisMeta {
            level: b.level,
            eigenvalues: b.nu.clone(),
            weights: b.weights.clone(),
        })
        .collect();
    std::fs::write(json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_eigenbasis_set(csv_path: &Path, json_path: &Path) -> Result<Vec<EigenBasis>, IoError> {
    let meta: Vec<EigenBasisMeta> = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    // level -> (m, dim) -> (t, value) series
    let mut values: BTreeMap<usize, BTreeMap<(usize, usize), Vec<(f64, f64)>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| -> Result<&str, IoError> {
            record
                .get(i)
                .ok_or_else(|| IoError::Format("short row in eigenbasis CSV".into()))
        };
        let level: usize = get(0)?.parse().map_err(|_| IoError::Format("level".into()))?;
        let m: usize = get(1)?.parse().map_err(|_| IoError::Format("m".into()))?;
        let dim: usize = get(2)?.parse().map_err(|_| IoError::Format("dim".into()))?;
        let t: f64 = get(3)?.parse().map_err(|_| IoError::Format("t".into()))?;
        let v: f64 = get(4)?.parse().map_err(|_| IoError::Format("value".into()))?;
        values
            .entry(level)
            .or_default()
            .entry((m, dim))
            .or_default()
            .push((t, v));
    }
    let mut out = Vec::new();
    for meta in meta {
        let per_level = values
            .get(&meta.level)
            .ok_or_else(|| IoError::Format(format!("no rows for level {}", meta.level)))?;
        let n_comp = per_level.keys().map(|&(m, _)| m).max().unwrap_or(0);
        let n_dims = per_level.keys().map(|&(_, d)| d).max().unwrap_or(0);
        let grid: Vec<f64> = per_level
            .get(&(1, 1))
            .ok_or_else(|| IoError::Format("missing (m=1, dim=1) series".into()))?
            .iter()
            .map(|&(t, _)| t)
            .collect();
        let mut psi = vec![DMatrix::zeros(grid.len(), n_comp); n_dims];
        for (&(m, dim), series) in per_level {
            if series.len() != grid.len() {
                return Err(IoError::Format(format!(
                    "grid length mismatch for level {} m {} dim {}",
                    meta.level, m, dim
                )));
            }
            for (g, &(_, v)) in series.iter().enumerate() {
                psi[dim - 1][(g, m - 1)] = v;
            }
        }
        out.push(EigenBasis {
            level: meta.level,
            grid,
            psi,
            nu: meta.eigenvalues,
            weights: meta.weights,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct UfpcaMeta {
    level: usize,
    dim: usize,
    upsilon: Vec<f64>,
    pve: f64,
    m: usize,
}

/// Serialize univariate FPCA results (all dimensions and levels of one
/// pipeline stage): eigenfunction CSV, score CSV, and a JSON sidecar with
/// eigenvalues, the PVE threshold, and the chosen truncation order.
pub fn write_ufpca_set(
    fpcas: &[(usize, UnivariateFpca)],
    csv_path: &Path,
    scores_path: &Path,
    json_path: &Path,
) -> Result<(), IoError> {
    let mut out = String::from("level,dim,m,t,value\n");
    let mut scores = String::from("level,dim,row,m,score\n");
    let mut meta = Vec::new();
    for (dim, fpca) in fpcas {
        for m in 0..fpca.phi.ncols() {
            for (g, &t) in fpca.grid.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    fpca.level,
                    dim + 1,
                    m + 1,
                    t,
                    fpca.phi[(g, m)]
                );
            }
        }
        for r in 0..fpca.scores.nrows() {
            for m in 0..fpca.scores.ncols() {
                let _ = writeln!(
                    scores,
                    "{},{},{},{},{}",
                    fpca.level,
                    dim + 1,
                    r,
                    m + 1,
                    fpca.scores[(r, m)]
                );
            }
        }
        meta.push(UfpcaMeta {
            level: fpca.level,
            dim: dim + 1,
            upsilon: fpca.upsilon.clone(),
            pve: fpca.pve_used,
            m: fpca.phi.ncols(),
        });
    }
    std::fs::write(csv_path, out)?;
    std::fs::write(scores_path, scores)?;
    std::fs::write(json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read back a univariate FPCA set written by [`write_ufpca_set`]:
/// `out[dim]` holds that dimension's levels (0-based dims).
pub fn read_ufpca_set(
    csv_path: &Path,
    scores_path: &Path,
    json_path: &Path,
) -> Result<Vec<Vec<UnivariateFpca>>, IoError> {
    let meta: Vec<UfpcaMeta> = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut series: BTreeMap<(usize, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let level: usize = record.get(0).unwrap_or("").parse().map_err(|_| IoError::Format("level".into()))?;
        let dim: usize = record.get(1).unwrap_or("").parse().map_err(|_| IoError::Format("dim".into()))?;
        let m: usize = record.get(2).unwrap_or("").parse().map_err(|_| IoError::Format("m".into()))?;
        let t: f64 = record.get(3).unwrap_or("").parse().map_err(|_| IoError::Format("t".into()))?;
        let v: f64 = record.get(4).unwrap_or("").parse().map_err(|_| IoError::Format("value".into()))?;
        series.entry((level, dim, m)).or_default().push((t, v));
    }
    let mut score_rows: BTreeMap<(usize, usize), BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(scores_path)?;
    for record in reader.records() {
        let record = record?;
        let level: usize = record.get(0).unwrap_or("").parse().map_err(|_| IoError::Format("level".into()))?;
        let dim: usize = record.get(1).unwrap_or("").parse().map_err(|_| IoError::Format("dim".into()))?;
        let row: usize = record.get(2).unwrap_or("").parse().map_err(|_| IoError::Format("row".into()))?;
        let m: usize = record.get(3).unwrap_or("").parse().map_err(|_| IoError::Format("m".into()))?;
        let v: f64 = record.get(4).unwrap_or("").parse().map_err(|_| IoError::Format("score".into()))?;
        score_rows.entry((level, dim)).or_default().insert((row, m), v);
    }
    let n_dims = meta.iter().map(|m| m.dim).max().unwrap_or(0);
    let mut out: Vec<Vec<UnivariateFpca>> = vec![Vec::new(); n_dims];
    for meta in meta {
        let grid: Vec<f64> = series
            .get(&(meta.level, meta.dim, 1))
            .ok_or_else(|| IoError::Format("missing eigenfunction series".into()))?
            .iter()
            .map(|&(t, _)| t)
            .collect();
        let mut phi = DMatrix::zeros(grid.len(), meta.m);
        for m in 0..meta.m {
            let s = series
                .get(&(meta.level, meta.dim, m + 1))
                .ok_or_else(|| IoError::Format("missing component series".into()))?;
            if s.len() != grid.len() {
                return Err(IoError::Format("ragged eigenfunction grid".into()));
            }
            for (g, &(_, v)) in s.iter().enumerate() {
                phi[(g, m)] = v;
            }
        }
        let scores = match score_rows.get(&(meta.level, meta.dim)) {
            Some(cells) => {
                let n_rows = cells.keys().map(|&(r, _)| r + 1).max().unwrap_or(0);
                DMatrix::from_fn(n_rows, meta.m, |r, c| {
                    cells.get(&(r, c + 1)).copied().unwrap_or(0.0)
                })
            }
            None => DMatrix::zeros(0, meta.m),
        };
        out[meta.dim - 1].push(UnivariateFpca {
            level: meta.level,
            grid,
            phi,
            upsilon: meta.upsilon,
            pve_used: meta.pve,
            scores,
        });
    }
    Ok(out)
}

/// File-system-safe version of a block or curve name.
pub fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SamplesMeta {
    chains: usize,
    draws_per_chain: usize,
    thin: usize,
    burnin: usize,
    seed: u64,
    acceptance: Vec<(String, f64)>,
    ridge_events: u64,
    blocks: Vec<String>,
}

fn block_file_name(name: &str) -> String {
    format!("{}.csv", sanitize_name(name))
}

fn write_draws_csv(path: &Path, draws: &DMatrix<f64>) -> Result<(), IoError> {
    let mut out = String::new();
    let header: Vec<String> = (0..draws.ncols()).map(|c| format!("c{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..draws.nrows() {
        for c in 0..draws.ncols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", draws[(r, c)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Persist posterior samples as a directory of per-block CSV draw
/// matrices plus JSON metadata (seeds, acceptance rates).
pub fn write_samples_dir(samples: &PosteriorSamples, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut blocks = Vec::new();
    let all: Vec<&BlockDraws> = samples
        .coef
        .iter()
        .chain(samples.tau2.iter())
        .chain(samples.scores.iter())
        .chain(samples.nu.iter())
        .collect();
    for block in all {
        blocks.push(block.name.clone());
        write_draws_csv(&dir.join(block_file_name(&block.name)), &block.draws)?;
    }
    let meta = SamplesMeta {
        chains: samples.chains,
        draws_per_chain: samples.draws_per_chain,
        thin: samples.thin,
        burnin: samples.burnin,
        seed: samples.seed,
        acceptance: samples.acceptance.clone(),
        ridge_events: samples.ridge_events,
        blocks,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Generic long-format curve table `kind,dim,unit,t,value`.
pub fn write_curves_csv(
    path: &Path,
    rows: &[(String, usize, String, f64, f64)],
) -> Result<(), IoError> {
    let mut out = String::from("kind,dim,unit,t,value\n");
    for (kind, dim, unit, t, v) in rows {
        let _ = writeln!(out, "{kind},{dim},{unit},{t},{v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curves_csv(
    path: &Path,
) -> Result<Vec<(String, usize, String, f64, f64)>, IoError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| -> Result<&str, IoError> {
            record
                .get(i)
                .ok_or_else(|| IoError::Format("short row in curves CSV".into()))
        };
        rows.push((
            get(0)?.to_string(),
            get(1)?
                .parse()
                .map_err(|_| IoError::Format("dim".into()))?,
            get(2)?.to_string(),
            get(3)?.parse().map_err(|_| IoError::Format("t".into()))?,
            get(4)?
                .parse()
                .map_err(|_| IoError::Format("value".into()))?,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::split_fourier_eigenbasis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigenbasis_round_trip() {
        let grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut basis = split_fourier_eigenbasis(4, 2, &grid, &mut rng);
        basis.nu = vec![2.0, 1.0, 0.5, 0.25];
        basis.weights = vec![1.5, 0.5];
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("basis.csv");
        let json = dir.path().join("basis.json");
        write_eigenbasis_set(std::slice::from_ref(&basis), &csv, &json).unwrap();
        let back = read_eigenbasis_set(&csv, &json).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].level, basis.level);
        assert_eq!(back[0].nu, basis.nu);
        assert_eq!(back[0].weights, basis.weights);
        for dim in 0..2 {
            let diff = (&back[0].psi[dim] - &basis.psi[dim]).abs().max();
            assert!(diff < 1e-12, "round trip drift {diff}");
        }
    }
}
