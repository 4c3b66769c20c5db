//! Post-hoc analysis exports: per-sample consistency-matrix heatmaps and 2-D
//! PCA projections of the fine-grained feature populations.
//!
//! Two families of artifacts, both plain CSV so plotting stays external:
//! * heatmap grids — the n×n patch and m×m token agreement matrices of
//!   individual samples,
//! * scatter data — every fine-grained row of the evaluation set projected
//!   onto the top two principal components of its population (contextual and
//!   semantic, image and text sides), each point tagged genuine or forged.
//!
//! PCA is computed from scratch: covariance, then power iteration with
//! deflation for the leading eigenpairs. All floats print in shortest
//! round-trip form, so identical inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::semantic::SemanticScorer;
use crate::synth::MediaPair;
use crate::tape::Graph;
use crate::train::{model_from_checkpoint, Checkpoint};

/// Principal subspace of one population: row mean, leading eigenvalues in
/// non-increasing order, and matching orthonormal components (rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    /// Total variance (trace of the covariance), for explained-variance
    /// ratios.
    pub total_variance: f64,
}

const MAX_POWER_ITERS: usize = 500_000;

/// Fits the top `q` eigenpairs of the sample covariance of `n` rows × `d`
/// columns (flattened row-major). Power iteration on the dense covariance;
/// after each converged direction the matrix is deflated by its rank-one
/// contribution. `tol` bounds the per-iteration sup-norm change of the unit
/// eigenvector.
pub fn fit_pca(rows: &[f64], n: usize, d: usize, q: usize, tol: f64) -> Result<Pca> {
    if n < 2 {
        return Err(Error::Validation(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if rows.len() != n * d {
        return Err(Error::Validation(format!(
            "{} values do not form {n}x{d}",
            rows.len()
        )));
    }
    if q == 0 || q > d {
        return Err(Error::Validation(format!(
            "component count {q} outside 1..={d}"
        )));
    }
    if !rows.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("PCA input contains non-finite values".into()));
    }

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += rows[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Dense covariance with the unbiased 1/(n-1) normalizer; symmetric fill.
    let mut cov = vec![0.0; d * d];
    let denom = (n - 1) as f64;
    for r in 0..n {
        let row = &rows[r * d..(r + 1) * d];
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum();

    let mut eigenvalues = Vec::with_capacity(q);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca1_a5e5);
    for _ in 0..q {
        // Deterministic random start: almost surely not orthogonal to the
        // leading eigenvector of the (deflated) covariance.
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        let mut converged = false;
        for _ in 0..MAX_POWER_ITERS {
            let mut w = matvec(&cov, &v, d);
            lambda = dot(&v, &w);
            let norm = dot(&w, &w).sqrt();
            if norm < 1e-300 {
                // Deflated matrix is (numerically) zero in this direction:
                // the remaining spectrum is zero and the current unit vector
                // is as good an eigenvector as any.
                lambda = 0.0;
                converged = true;
                break;
            }
            for x in &mut w {
                *x /= norm;
            }
            let step = v
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            v = w;
            if step < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "power iteration failed to reach tolerance {tol} within {MAX_POWER_ITERS} iterations"
            )));
        }
        // Fix the sign so exports are reproducible down to the byte: the
        // first coordinate of meaningful magnitude is made positive.
        if let Some(lead) = v.iter().find(|x| x.abs() > 1e-8) {
            if *lead < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda.max(0.0));
        components.push(v);
    }
    Ok(Pca {
        mean,
        eigenvalues,
        components,
        total_variance,
    })
}

fn matvec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let row = &m[i * d..(i + 1) * d];
            dot(row, v)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

impl Pca {
    /// Projects `n` rows onto the fitted components; returns n×q flattened.
    pub fn project(&self, rows: &[f64], n: usize) -> Result<Vec<f64>> {
        let d = self.mean.len();
        if rows.len() != n * d {
            return Err(Error::Validation(format!(
                "{} values do not form {n}x{d}",
                rows.len()
            )));
        }
        let q = self.components.len();
        let mut out = Vec::with_capacity(n * q);
        for r in 0..n {
            let row = &rows[r * d..(r + 1) * d];
            for comp in &self.components {
                let y: f64 = row
                    .iter()
                    .zip(&self.mean)
                    .zip(comp)
                    .map(|((x, m), c)| (x - m) * c)
                    .sum();
                out.push(y);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Pca::project`] restricted to the fitted subspace:
    /// mean + y·V. Exact for data that lies in the subspace.
    pub fn reconstruct(&self, projected: &[f64], n: usize) -> Result<Vec<f64>> {
        let d = self.mean.len();
        let q = self.components.len();
        if projected.len() != n * q {
            return Err(Error::Validation(format!(
                "{} values do not form {n}x{q}",
                projected.len()
            )));
        }
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let y = &projected[r * q..(r + 1) * q];
            for c in 0..d {
                let mut x = self.mean[c];
                for (k, comp) in self.components.iter().enumerate() {
                    x += y[k] * comp[c];
                }
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// n×n matrix as CSV: header `c0..c{n-1}`, one row per line, shortest
/// round-trip float formatting.
pub fn matrix_csv(n: usize, values: &[f64]) -> Result<String> {
    if values.len() != n * n {
        return Err(Error::Validation(format!(
            "{} values do not form {n}x{n}",
            values.len()
        )));
    }
    let mut s = String::new();
    for j in 0..n {
        if j > 0 {
            s.push(',');
        }
        let _ = write!(s, "c{j}");
    }
    s.push('\n');
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", values[i * n + j]);
        }
        s.push('\n');
    }
    Ok(s)
}

/// One scatter point of a population projection.
#[derive(Clone, Debug)]
struct PopPoint {
    sample_id: u64,
    row: usize,
    forged: bool,
    x: f64,
    y: f64,
}

fn population_csv(points: &[PopPoint]) -> String {
    let mut s = String::from("pc1,pc2,sample_id,row,tag\n");
    for p in points {
        let tag = if p.forged { "forged" } else { "genuine" };
        let _ = writeln!(s, "{},{},{},{},{tag}", p.x, p.y, p.sample_id, p.row);
    }
    s
}

/// What one export run produced: the files written and, per population, the
/// point count, the top eigenvalues, and the explained-variance ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSummary {
    pub files: Vec<PathBuf>,
    pub populations: BTreeMap<String, PopulationStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationStats {
    pub points: usize,
    pub eigenvalues: Vec<f64>,
    pub explained_variance: f64,
}

/// Evaluates φ on fixed row values in a fresh graph — the same arithmetic the
/// scorer performs in the full forward pass, reproduced bit-for-bit.
fn phi_rows<R: Real>(
    model: &Model<R>,
    scorer: &SemanticScorer,
    rows: &[f64],
    n: usize,
    d: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.store);
    let x = g.constant_f64(n, d, rows)?;
    let ph = scorer.phi.apply(&mut g, x)?;
    Ok(g.value_f64(ph))
}

/// Writes every analysis artifact for `pairs` under `out_dir`:
/// * `matrix_image_<id>.csv` / `matrix_text_<id>.csv` heatmaps for the first
///   `heatmap_limit` samples (when the contextual branches exist),
/// * `pca_<population>.csv` scatter data for the populations the model has,
/// * `eigenvalues.json` with the numbers behind the projections.
pub fn export_analysis_model<R: Real>(
    model: &Model<R>,
    pairs: &[MediaPair],
    out_dir: &Path,
    heatmap_limit: usize,
) -> Result<AnalysisSummary> {
    if pairs.is_empty() {
        return Err(Error::Validation("nothing to analyze: no samples".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let d = model.spec.dim;
    let mut files = Vec::new();
    let mut populations = BTreeMap::new();

    // One trace per sample; every artifact reads from these.
    let mut traces = Vec::with_capacity(pairs.len());
    for p in pairs {
        traces.push(model.trace(p)?);
    }

    for (pair, trace) in pairs.iter().zip(&traces).take(heatmap_limit) {
        if let Some(m) = &trace.m_pat {
            let n = pair.patch_labels.len();
            let path = out_dir.join(format!("matrix_image_{}.csv", pair.id));
            std::fs::write(&path, matrix_csv(n, m)?)?;
            files.push(path);
        }
        if let Some(m) = &trace.m_tok {
            let n = pair.token_labels.len();
            let path = out_dir.join(format!("matrix_text_{}.csv", pair.id));
            std::fs::write(&path, matrix_csv(n, m)?)?;
            files.push(path);
        }
    }

    // The four fine-grained populations. Image rows are all real; text rows
    // are cut at each sample's valid length so padding never plots.
    let mut rows_by_pop: BTreeMap<&str, (Vec<f64>, Vec<PopPoint>)> = BTreeMap::new();
    for (pair, trace) in pairs.iter().zip(&traces) {
        let n = pair.patch_labels.len();
        let m_valid = pair.valid_tokens;
        let img_tags: Vec<bool> = pair.patch_labels.iter().map(|&l| l == 1).collect();
        let txt_tags: Vec<bool> = pair.token_labels[..m_valid].iter().map(|&l| l == 1).collect();

        let mut push = |name: &'static str, data: &[f64], count: usize, tags: &[bool]| {
            let entry = rows_by_pop.entry(name).or_default();
            for r in 0..count {
                entry.0.extend_from_slice(&data[r * d..(r + 1) * d]);
                entry.1.push(PopPoint {
                    sample_id: pair.id,
                    row: r,
                    forged: tags[r],
                    x: 0.0,
                    y: 0.0,
                });
            }
        };

        push("contextual_image", &trace.fine_image, n, &img_tags);
        push("contextual_text", &trace.fine_text, m_valid, &txt_tags);
        if let Some(sc) = &model.arch.image_scorer {
            let ph = phi_rows(model, sc, &trace.fine_image, n, d)?;
            push("semantic_image", &ph, n, &img_tags);
        }
        if let Some(sc) = &model.arch.text_scorer {
            let ph = phi_rows(model, sc, &trace.fine_text[..m_valid * d], m_valid, d)?;
            push("semantic_text", &ph, m_valid, &txt_tags);
        }
    }

    for (name, (rows, mut points)) in rows_by_pop {
        let n_points = points.len();
        if n_points < 2 {
            continue;
        }
        let pca = fit_pca(&rows, n_points, d, 2, 1e-10)?;
        let proj = pca.project(&rows, n_points)?;
        for (i, p) in points.iter_mut().enumerate() {
            p.x = proj[i * 2];
            p.y = proj[i * 2 + 1];
        }
        let path = out_dir.join(format!("pca_{name}.csv"));
        std::fs::write(&path, population_csv(&points))?;
        files.push(path);
        let explained = if pca.total_variance > 0.0 {
            (pca.eigenvalues[0] + pca.eigenvalues[1]) / pca.total_variance
        } else {
            0.0
        };
        populations.insert(
            name.to_string(),
            PopulationStats {
                points: n_points,
                eigenvalues: pca.eigenvalues.clone(),
                explained_variance: explained,
            },
        );
    }

    let eig_path = out_dir.join("eigenvalues.json");
    std::fs::write(&eig_path, serde_json::to_string_pretty(&populations)?)?;
    files.push(eig_path);

    Ok(AnalysisSummary { files, populations })
}

/// Precision-dispatching wrapper over a saved checkpoint.
pub fn export_analysis(
    ckpt: &Checkpoint,
    pairs: &[MediaPair],
    out_dir: &Path,
    heatmap_limit: usize,
) -> Result<AnalysisSummary> {
    match ckpt.config.precision {
        Precision::F64 => {
            export_analysis_model(&model_from_checkpoint::<f64>(ckpt)?, pairs, out_dir, heatmap_limit)
        }
        Precision::F32 => {
            export_analysis_model(&model_from_checkpoint::<f32>(ckpt)?, pairs, out_dir, heatmap_limit)
        }
    }
}
