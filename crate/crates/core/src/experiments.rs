//! Diagnostic protocols: group-estimate reliability, activation partial
//! correlations and filter Gram summaries.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::importance::taylor_importance;
use crate::model::{evaluate, FilterRef, ForwardOptions, LayerKind, ModelGraph, UnitMask};
use crate::ortho::{self, median};
use crate::rng::seeded;
use crate::Tensor;

pub const MIN_TRIALS: usize = 30;

/// Pearson correlation by the two-pass formula; `None` when either side
/// has zero variance or the inputs are unusable.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub group_size: usize,
    pub estimate: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityResult {
    pub group_fraction: f64,
    pub data_fraction: f64,
    pub trials: usize,
    /// `None` marks a degenerate (zero variance) cell.
    pub pearson_r: Option<f64>,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Clone)]
pub struct ReliabilityConfig {
    pub group_fractions: Vec<f64>,
    pub data_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Batch size of the loss evaluations.
    pub batch: usize,
    /// Batch size over which first-order terms are squared and averaged.
    pub importance_batch: usize,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            group_fractions: vec![0.1, 0.2, 0.4],
            data_fractions: vec![1.0],
            trials: 100,
            seed: 0,
            batch: 256,
            importance_batch: 32,
        }
    }
}

impl ReliabilityConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.trials < MIN_TRIALS {
            p.push(format!("reliability.trials must be >= {MIN_TRIALS}"));
        }
        if self.group_fractions.is_empty()
            || self.group_fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0))
        {
            p.push("reliability.group_fractions entries must lie in (0, 1)".into());
        }
        if self.data_fractions.is_empty()
            || self.data_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            p.push("reliability.data_fractions entries must lie in (0, 1]".into());
        }
        if self.batch == 0 || self.importance_batch == 0 {
            p.push("reliability batch sizes must be >= 1".into());
        }
        p
    }
}

/// Sum of individual first-order scores versus the squared loss
/// change of actually zeroing random groups.
pub fn reliability_experiment(
    model: &ModelGraph,
    data: &Dataset,
    cfg: &ReliabilityConfig,
) -> Result<Vec<ReliabilityResult>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut grid = Vec::new();
    for &df in &cfg.data_fractions {
        let subset = data.head_fraction(df)?;
        let table = taylor_importance(model, &subset, cfg.importance_batch, 1.0)?;
        let (ids, scores): (Vec<FilterRef>, Vec<f64>) = table.scores.into_iter().unzip();
        // class outputs are not part of the sampled population
        let pool: Vec<usize> = (0..ids.len())
            .filter(|&i| !matches!(model.nodes[ids[i].layer].kind, LayerKind::Classifier(_)))
            .collect();
        let (base_loss, _) = evaluate(model, &subset.images, &subset.labels, cfg.batch, None)?;
        for &gf in &cfg.group_fractions {
            let size = ((gf * pool.len() as f64).round() as usize).clamp(1, pool.len());
            let records: Result<Vec<TrialRecord>> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = seeded(cfg.seed.wrapping_add(trial as u64));
                    let picks: Vec<usize> = sample(&mut rng, pool.len(), size)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect();
                    let mask: UnitMask = picks.iter().map(|&i| ids[i]).collect();
                    let estimate = picks.iter().map(|&i| scores[i]).sum();
                    let (masked, _) = evaluate(
                        model,
                        &subset.images,
                        &subset.labels,
                        cfg.batch,
                        Some(&mask),
                    )?;
                    Ok(TrialRecord {
                        trial,
                        group_size: size,
                        estimate,
                        baseline: (base_loss - masked).powi(2),
                    })
                })
                .collect();
            let records = records?;
            let est: Vec<f64> = records.iter().map(|r| r.estimate).collect();
            let base: Vec<f64> = records.iter().map(|r| r.baseline).collect();
            grid.push(ReliabilityResult {
                group_fraction: gf,
                data_fraction: df,
                trials: cfg.trials,
                pearson_r: pearson(&est, &base),
                records,
            });
        }
    }
    Ok(grid)
}

fn fmt_r(r: Option<f64>) -> String {
    r.map(|v| v.to_string())
        .unwrap_or_else(|| "undefined".into())
}

/// Rows are group fractions, columns data fractions.
pub fn write_reliability_grid<W: Write>(mut w: W, grid: &[ReliabilityResult]) -> Result<()> {
    let mut dfs: Vec<f64> = Vec::new();
    let mut gfs: Vec<f64> = Vec::new();
    for r in grid {
        if !dfs.contains(&r.data_fraction) {
            dfs.push(r.data_fraction);
        }
        if !gfs.contains(&r.group_fraction) {
            gfs.push(r.group_fraction);
        }
    }
    write!(w, "group_fraction")?;
    for d in &dfs {
        write!(w, ",df={d}")?;
    }
    writeln!(w)?;
    for g in &gfs {
        write!(w, "{g}")?;
        for d in &dfs {
            let cell = grid
                .iter()
                .find(|r| r.group_fraction == *g && r.data_fraction == *d);
            write!(w, ",{}", fmt_r(cell.and_then(|c| c.pearson_r)))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_reliability_trials<W: Write>(mut w: W, grid: &[ReliabilityResult]) -> Result<()> {
    writeln!(
        w,
        "group_fraction,data_fraction,trial,group_size,estimate,baseline"
    )?;
    for r in grid {
        for t in &r.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.group_fraction, r.data_fraction, t.trial, t.group_size, t.estimate, t.baseline
            )?;
        }
    }
    Ok(())
}

pub const RIDGE: f64 = 1e-4;

/// Partial correlations of the columns of `samples` (rows = observations).
pub fn partial_correlations(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = samples.shape();
    if n < 2 || d == 0 {
        return Err(Error::InvalidArgument(
            "partial correlation needs >= 2 samples".into(),
        ));
    }
    let means: Vec<f64> = (0..d).map(|j| samples.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| samples[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let sd: Vec<f64> = (0..d).map(|j| cov[(j, j)].sqrt()).collect();
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Linalg(
            "constant channel in partial correlation".into(),
        ));
    }
    let corr = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 + RIDGE
        } else {
            cov[(i, j)] / (sd[i] * sd[j])
        }
    });
    let p = corr
        .try_inverse()
        .ok_or_else(|| Error::Linalg("correlation matrix singular beyond ridge".into()))?;
    let rho = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            -p[(i, j)] / (p[(i, i)] * p[(j, j)]).sqrt()
        }
    });
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("non-finite precision matrix".into()));
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        let nan = f64::NAN;
        return Summary {
            mean: nan,
            q1: nan,
            median: nan,
            q3: nan,
            max: nan,
        };
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Summary {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        q1: quantile(&s, 0.25),
        median: median(&s),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcorrLayer {
    pub layer: usize,
    /// Channels entering the analysis (constant ones are skipped).
    pub channels: usize,
    pub samples: usize,
    pub summary: Summary,
}

/// Activation channels of regularized layer `k`: its batchnorm output when
/// one follows, else the layer output.
fn activation_node(model: &ModelGraph, k: usize) -> usize {
    match model.nodes.get(k + 1).map(|n| &n.kind) {
        Some(LayerKind::BatchNorm(_)) => k + 1,
        _ => k,
    }
}

fn channel_samples(a: &Tensor) -> (DMatrix<f64>, Vec<usize>) {
    let s = a.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let get = |i: usize, ch: usize, p: usize| a.data()[(i * c + ch) * plane + p];
    let live: Vec<usize> = (0..c)
        .filter(|&ch| {
            let first = get(0, ch, 0);
            (0..n).any(|i| (0..plane).any(|p| (get(i, ch, p) - first).abs() > 1e-12))
        })
        .collect();
    let m = DMatrix::from_fn(n * plane, live.len(), |row, j| {
        get(row / plane, live[j], row % plane)
    });
    (m, live)
}

/// Per regularized layer, summaries of `|ρ_ij|`, `i < j`, over a probe batch.
pub fn partial_correlation_stats(model: &ModelGraph, probe: &Tensor) -> Result<Vec<ParcorrLayer>> {
    let layers = model.regularized_layers();
    let widest = layers
        .iter()
        .filter_map(|&k| model.conv(k).map(|c| c.filters()))
        .max()
        .unwrap_or(0);
    if probe.dim0() < 4 * widest {
        return Err(Error::InvalidArgument(format!(
            "probe batch {} smaller than 4x widest layer ({widest})",
            probe.dim0()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(probe.clone())?;
    let trace = model.forward(&mut tape, x, ForwardOptions::eval())?;
    let mut out = Vec::new();
    for k in layers {
        let a = tape.value(trace.outputs[activation_node(model, k)]);
        let (m, live) = channel_samples(a);
        let rho = if live.len() >= 2 {
            partial_correlations(&m)?
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut vals = Vec::new();
        for i in 0..live.len() {
            for j in i + 1..live.len() {
                vals.push(rho[(i, j)].abs());
            }
        }
        out.push(ParcorrLayer {
            layer: k,
            channels: live.len(),
            samples: m.nrows(),
            summary: summarize(&vals),
        });
    }
    Ok(out)
}

pub fn write_parcorr<W: Write>(mut w: W, rows: &[ParcorrLayer]) -> Result<()> {
    writeln!(w, "layer,channels,samples,mean,q1,median,q3,max")?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.layer, r.channels, r.samples, s.mean, s.q1, s.median, s.q3, s.max
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    pub layer: usize,
    pub filters: usize,
    pub offdiag_mean: f64,
    pub offdiag_max: f64,
    pub sigma_min: f64,
    pub sigma_median: f64,
    pub sigma_max: f64,
}

/// Filter Gram `W Wᵀ` of a layer's flattened filters.
pub fn filter_gram(w: &Tensor) -> DMatrix<f64> {
    let (m, d) = (w.dim0(), w.row_len());
    DMatrix::from_row_slice(m, m, &crate::engine::kernels::gram_rows(w.data(), m, d))
}

pub fn gram_offdiag_stats(model: &ModelGraph) -> Result<Vec<GramStats>> {
    ortho::diagnostics(model).map(|rows| {
        rows.into_iter()
            .map(|d| GramStats {
                layer: d.layer,
                filters: d.filters,
                offdiag_mean: d.offdiag_mean,
                offdiag_max: d.offdiag_max,
                sigma_min: d.sigma_min,
                sigma_median: d.sigma_median,
                sigma_max: d.sigma_max,
            })
            .collect()
    })
}

pub fn write_gram_stats<W: Write>(mut w: W, rows: &[GramStats]) -> Result<()> {
    writeln!(
        w,
        "layer,filters,offdiag_mean,offdiag_max,sigma_min,sigma_median,sigma_max"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.layer,
            r.filters,
            r.offdiag_mean,
            r.offdiag_max,
            r.sigma_min,
            r.sigma_median,
            r.sigma_max
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{build_model, Family, ModelSpec};
    use crate::pruning::{apply_plan, PrunePlan};
    use crate::rng::normal_tensor;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let cov: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / (n - 1.0);
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0);
        cov / (vx.sqrt() * vy.sqrt())
    }

    proptest! {
        #[test]
        fn pearson_matches_two_pass(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..60)) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Some(r) = pearson(&x, &y) {
                prop_assert!((r - textbook_pearson(&x, &y)).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn pearson_identity_and_degenerate() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[2.0; 10], &x[..10]), None);
    }

    #[test]
    fn shuffled_pairs_are_uncorrelated() {
        let mut rng = seeded(11);
        let x = normal_tensor(&[100], 1.0, &mut rng).into_data();
        let mut hits = 0;
        for s in 0..20 {
            let mut y = x.clone();
            y.shuffle(&mut seeded(100 + s));
            if pearson(&x, &y).unwrap().abs() < 0.3 {
                hits += 1;
            }
        }
        // permutation null sd is about 0.1, so |r| >= 0.3 is a 3-sigma event
        assert!(hits >= 19);
    }

    #[test]
    fn reliability_grid_shape_and_determinism() {
        let split = generate_synthetic(&SyntheticSpec {
            train: 64,
            val: 16,
            extent: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let m = build_model(&ModelSpec::new(Family::Plain, &[4, 8], 4, 3)).unwrap();
        let cfg = ReliabilityConfig {
            group_fractions: vec![0.2, 0.4],
            data_fractions: vec![0.5, 1.0],
            trials: 30,
            seed: 5,
            batch: 32,
            importance_batch: 16,
        };
        let a = reliability_experiment(&m, &split.train, &cfg).unwrap();
        let b = reliability_experiment(&m, &split.train, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut buf = Vec::new();
        write_reliability_grid(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("group_fraction,df=0.5,df=1"));
        assert!(
            reliability_experiment(&m, &split.train, &ReliabilityConfig { trials: 5, ..cfg })
                .is_err()
        );
    }

    #[test]
    fn independent_channels_have_small_partial_correlation() {
        let mut rng = seeded(4);
        let d = 8;
        let n = 64 * d * 8;
        let m = DMatrix::from_vec(n, d, normal_tensor(&[n * d], 1.0, &mut rng).into_data());
        let rho = partial_correlations(&m).unwrap();
        let mut v = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                v.push(rho[(i, j)].abs());
                assert!((rho[(i, j)] - rho[(j, i)]).abs() < 1e-12);
            }
            assert_eq!(rho[(i, i)], 1.0);
        }
        assert!(summarize(&v).median < 0.15);
    }

    #[test]
    fn duplicated_channel_is_fully_redundant() {
        let mut rng = seeded(6);
        let n = 400;
        let base = normal_tensor(&[n * 3], 1.0, &mut rng).into_data();
        let m = DMatrix::from_fn(n, 4, |i, j| if j == 3 { base[i] } else { base[j * n + i] });
        let rho = partial_correlations(&m).unwrap();
        assert!(rho[(0, 3)].abs() > 0.999);
    }

    #[test]
    fn parcorr_per_layer_and_probe_size() {
        let m = build_model(&ModelSpec::new(Family::Plain, &[4, 6], 3, 2)).unwrap();
        let mut rng = seeded(1);
        let probe = normal_tensor(&[24, 3, 8, 8], 1.0, &mut rng);
        let rows = partial_correlation_stats(&m, &probe).unwrap();
        assert_eq!(rows.len(), m.regularized_layers().len());
        assert!(rows
            .iter()
            .all(|r| r.summary.median >= 0.0 && r.summary.max <= 1.0 + 1e-9));
        assert!(partial_correlation_stats(&m, &probe.select_axis0(&[0, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn orthonormal_and_duplicated_grams() {
        let mut w = Tensor::zeros(&[3, 1, 2, 2]);
        for i in 0..3 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let (mean, max) = ortho::offdiag_stats(&w);
        assert_eq!((mean, max), (0.0, 0.0));
        assert!(ortho::singular_spectrum(&w)
            .unwrap()
            .iter()
            .all(|s| (s - 1.0).abs() < 1e-12));
        w.data_mut()[8..12].copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(ortho::offdiag_stats(&w).1, 1.0);
    }

    #[test]
    fn surviving_filters_keep_gram_submatrix() {
        let m = build_model(&ModelSpec::new(Family::Plain, &[6, 6], 3, 8)).unwrap();
        let victims = [
            FilterRef {
                layer: 0,
                filter: 1,
            },
            FilterRef {
                layer: 0,
                filter: 4,
            },
        ];
        let plan =
            PrunePlan::from_victims(&m, victims.into_iter().collect(), "manual", 0.1).unwrap();
        let p = apply_plan(&m, &plan).unwrap();
        let g0 = filter_gram(&m.conv(0).unwrap().weight);
        let g1 = filter_gram(&p.conv(0).unwrap().weight);
        let keep = [0, 2, 3, 5];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(g1[(a, b)], g0[(i, j)]);
            }
        }
        let s0 = &gram_offdiag_stats(&m).unwrap()[0];
        let s1 = &gram_offdiag_stats(&p).unwrap()[0];
        assert!(s1.offdiag_max <= s0.offdiag_max);
    }
}
