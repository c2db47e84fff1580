//! Orthonormality regularizer over convolutional filter banks.
//!
//! Each regularized layer contributes `alpha(l) * |G - I|_1`, where `G` is
//! the Gram matrix of its flattened filters (or of the transposed bank when
//! there are more filters than weights per filter) and
//! `alpha(l) = sqrt(M_l) / sum_k sqrt(M_k)`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Family, ForwardTrace, ModelGraph, ParamRef, ParamSlot};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthoConfig {
    pub lambda: f64,
    pub enabled: bool,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        OrthoConfig {
            lambda: 0.01,
            enabled: false,
        }
    }
}

impl OrthoConfig {
    pub fn new(lambda: f64) -> Self {
        OrthoConfig {
            lambda,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        OrthoConfig {
            lambda: 0.0,
            enabled: false,
        }
    }

    /// Whether the regularizer contributes to the loss.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            p.push(format!(
                "ortho lambda must lie in [0, 1], got {}",
                self.lambda
            ));
        }
        p
    }
}

/// Regularization strength used when a config leaves it unset.
pub fn default_lambda(family: Family) -> f64 {
    match family {
        Family::Plain | Family::Residual => 0.01,
        Family::DepthSep => 0.001,
    }
}

/// `alpha(l)` for every layer given the filter counts.
pub fn layer_coefficients(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no regularized layers".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("layer with zero filters".into()));
    }
    let total: f64 = counts.iter().map(|&m| (m as f64).sqrt()).sum();
    Ok(counts.iter().map(|&m| (m as f64).sqrt() / total).collect())
}

pub fn layer_coefficient(l: usize, counts: &[usize]) -> Result<f64> {
    layer_coefficients(counts)?
        .get(l)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("layer {l} out of range")))
}

/// Value of the Gram penalty of a filter bank (rows of axis 0 are filters).
pub fn gram_penalty(w: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(w.clone())?;
    let p = tape.gram_penalty(v)?;
    Ok(tape.value(p).data()[0])
}

/// Regularized layers of the model with their current filter counts.
pub fn regularized_counts(model: &ModelGraph) -> Vec<(usize, usize)> {
    model
        .regularized_layers()
        .into_iter()
        .map(|k| (k, model.conv(k).map(|c| c.filters()).unwrap_or(0)))
        .collect()
}

/// The summed, coefficient-weighted penalty recorded on `tape` using the
/// weight variables of a forward trace.
pub fn ortho_loss(tape: &mut Tape, model: &ModelGraph, trace: &ForwardTrace) -> Result<Var> {
    let layers = regularized_counts(model);
    let alphas = layer_coefficients(&layers.iter().map(|&(_, m)| m).collect::<Vec<_>>())?;
    let mut total: Option<Var> = None;
    for (&(k, _), &alpha) in layers.iter().zip(&alphas) {
        let w = trace
            .param(ParamRef {
                node: k,
                slot: ParamSlot::Weight,
            })
            .ok_or_else(|| Error::Model(format!("node {k} weight missing from trace")))?;
        let p = tape.gram_penalty(w)?;
        let term = tape.scale(p, alpha)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no regularized layers".into()))
}

/// Value of the full regularizer without recording gradients.
pub fn ortho_value(model: &ModelGraph) -> Result<f64> {
    let layers = regularized_counts(model);
    let alphas = layer_coefficients(&layers.iter().map(|&(_, m)| m).collect::<Vec<_>>())?;
    let mut total = 0.0;
    for (&(k, _), &alpha) in layers.iter().zip(&alphas) {
        total += alpha * gram_penalty(&model.conv(k).unwrap().weight)?;
    }
    Ok(total)
}

fn as_matrix(w: &Tensor) -> Result<DMatrix<f64>> {
    if w.numel() == 0 || w.shape().is_empty() {
        return Err(Error::Linalg("empty weight".into()));
    }
    Ok(DMatrix::from_row_slice(w.dim0(), w.row_len(), w.data()))
}

/// Singular values of the flattened filter bank, descending.
pub fn singular_spectrum(w: &Tensor) -> Result<Vec<f64>> {
    let m = as_matrix(w)?;
    let svd = m
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Linalg("singular value decomposition did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub filters: usize,
    pub alpha: f64,
    pub penalty: f64,
    pub sigma_min: f64,
    pub sigma_median: f64,
    pub sigma_max: f64,
    pub offdiag_mean: f64,
    pub offdiag_max: f64,
}

/// Mean and max of `|G_ij|`, `i != j`, for the filter Gram `W Wᵀ`.
pub fn offdiag_stats(w: &Tensor) -> (f64, f64) {
    let (m, d) = (w.dim0(), w.row_len());
    let g = kernels::gram_rows(w.data(), m, d);
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let v = g[i * m + j].abs();
                sum += v;
                max = max.max(v);
                n += 1;
            }
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (sum / n as f64, max)
    }
}

pub fn diagnostics(model: &ModelGraph) -> Result<Vec<LayerDiagnostic>> {
    let layers = regularized_counts(model);
    let alphas = layer_coefficients(&layers.iter().map(|&(_, m)| m).collect::<Vec<_>>())?;
    layers
        .iter()
        .zip(&alphas)
        .map(|(&(k, m), &alpha)| {
            let w = &model.conv(k).unwrap().weight;
            let s = singular_spectrum(w)?;
            let (offdiag_mean, offdiag_max) = offdiag_stats(w);
            Ok(LayerDiagnostic {
                layer: k,
                filters: m,
                alpha,
                penalty: gram_penalty(w)?,
                sigma_min: *s.last().unwrap(),
                sigma_median: median(&s),
                sigma_max: s[0],
                offdiag_mean,
                offdiag_max,
            })
        })
        .collect()
}

pub const DIAGNOSTIC_HEADER: &str =
    "epoch,layer,M_l,alpha,penalty,sigma_min,sigma_median,sigma_max";

pub fn write_diagnostics<W: Write>(mut w: W, epoch: usize, rows: &[LayerDiagnostic]) -> Result<()> {
    for r in rows {
        writeln!(
            w,
            "{epoch},{},{},{},{},{},{},{}",
            r.layer, r.filters, r.alpha, r.penalty, r.sigma_min, r.sigma_median, r.sigma_max
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Family, ModelSpec};
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn coefficients() {
        let a = layer_coefficients(&[16, 64]).unwrap();
        assert!(close(a[0], 1.0 / 3.0) && close(a[1], 2.0 / 3.0));
        assert_eq!(layer_coefficients(&[5]).unwrap(), vec![1.0]);
        for &x in &layer_coefficients(&[7, 7, 7, 7]).unwrap() {
            assert!(close(x, 0.25));
        }
        assert!(layer_coefficients(&[]).is_err());
        assert!(layer_coefficient(2, &[1, 2]).is_err());
    }

    #[test]
    fn penalty_examples() {
        // two distinct basis vectors of R^3 as filters
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(gram_penalty(&w).unwrap(), 0.0);
        let dup = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(close(gram_penalty(&dup).unwrap(), 2.0));
        let fat = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gram_penalty(&fat).unwrap(), 0.0);
    }

    #[test]
    fn two_layer_combination() {
        let mut rng = seeded(2);
        let w1 = normal_tensor(&[16, 80], 0.1, &mut rng);
        let w2 = normal_tensor(&[64, 100], 0.1, &mut rng);
        let (p1, p2) = (gram_penalty(&w1).unwrap(), gram_penalty(&w2).unwrap());
        let a = layer_coefficients(&[16, 64]).unwrap();
        assert!((a[0] * p1 + a[1] * p2 - (p1 + 2.0 * p2) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_layer_loss_is_penalty() {
        let spec = ModelSpec::new(Family::Plain, &[4], 2, 3).with_in_channels(1);
        let m = build_model(&spec).unwrap();
        let p = gram_penalty(&m.conv(0).unwrap().weight).unwrap();
        assert!((ortho_value(&m).unwrap() - p).abs() < 1e-12);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        let trace = m
            .forward(&mut tape, x, crate::model::ForwardOptions::train())
            .unwrap();
        let l = ortho_loss(&mut tape, &m, &trace).unwrap();
        assert!((tape.value(l).data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn spectrum_examples() {
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        for s in singular_spectrum(&eye).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (u, v) = ([0.6, 0.8], [0.0, 1.0, 0.0]);
        let r1 = Tensor::from_fn(&[2, 3], |i| u[i / 3] * v[i % 3]);
        let s = singular_spectrum(&r1).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j].powi(2))
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut e: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
        e.sort_by(|x, y| y.total_cmp(x));
        e
    }

    #[test]
    fn spectrum_matches_gram_eigenvalues() {
        let mut rng = seeded(11);
        for shape in [[5usize, 12], [12, 5], [6, 6]] {
            let w = normal_tensor(&shape, 1.0, &mut rng);
            let s = singular_spectrum(&w).unwrap();
            let (m, d) = (shape[0], shape[1]);
            let (g, n) = if m <= d {
                (kernels::gram_rows(w.data(), m, d), m)
            } else {
                (kernels::gram_cols(w.data(), m, d), d)
            };
            let e = jacobi_eigenvalues(g, n);
            for (si, ei) in s.iter().zip(&e) {
                assert!((si * si - ei).abs() < 1e-8, "{si} vs {ei}");
            }
        }
    }

    #[test]
    fn offdiag_of_duplicates() {
        let dup = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let (mean, max) = offdiag_stats(&dup);
        assert!(close(max, 1.0) && close(mean, 1.0));
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(offdiag_stats(&eye), (0.0, 0.0));
    }

    #[test]
    fn diagnostics_cover_regularized_layers() {
        let m = build_model(&ModelSpec::new(Family::DepthSep, &[4, 8], 2, 0)).unwrap();
        let d = diagnostics(&m).unwrap();
        assert_eq!(d.len(), m.regularized_layers().len());
        assert!((d.iter().map(|r| r.alpha).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_diagnostics(&mut buf, 0, &d).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), d.len());
    }

    proptest! {
        #[test]
        fn penalty_is_permutation_invariant(seed in 0u64..500, m in 1usize..7, d in 1usize..7) {
            let w = normal_tensor(&[m, d], 1.0, &mut seeded(seed));
            let rev: Vec<usize> = (0..m).rev().collect();
            let p = gram_penalty(&w).unwrap();
            let q = gram_penalty(&w.select_axis0(&rev).unwrap()).unwrap();
            prop_assert!((p - q).abs() <= 1e-9 * p.max(1.0));
            prop_assert!(p >= 0.0);
        }

        #[test]
        fn orthonormal_rows_have_zero_penalty(seed in 0u64..200, m in 1usize..6, extra in 0usize..4) {
            let d = m + extra;
            let a = DMatrix::from_row_slice(d, m, normal_tensor(&[d, m], 1.0, &mut seeded(seed)).data());
            let q = a.qr().q();
            let w = Tensor::from_fn(&[m, d], |i| q[(i % d, i / d)]);
            prop_assert!(gram_penalty(&w).unwrap() < 1e-6);
        }
    }
}
