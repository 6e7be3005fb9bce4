//! Kernel herding from an embedding: greedy grid-scan sampling whose
//! empirical embedding tracks the target functional.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingFunctional;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// Divisor applied to the running kernel sum at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `1 / t`.
    #[default]
    Step,
    /// `1 / (t - 1)`.
    PreviousCount,
}

impl Normalization {
    fn factor(&self, t: usize) -> f64 {
        match self {
            Normalization::Step => 1.0 / t as f64,
            Normalization::PreviousCount if t > 1 => 1.0 / (t - 1) as f64,
            Normalization::PreviousCount => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Explicit(Vec<f64>),
    Range { lo: f64, hi: f64, points: usize },
}

/// Grid points used when none is configured.
pub const DEFAULT_GRID_POINTS: usize = 2048;

impl Grid {
    /// `[min y - 3 sd, max y + 3 sd]` with the default resolution.
    pub fn around(outcomes: &[f64]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::config("default grid needs outcomes"));
        }
        let lo = outcomes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = outcomes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sd = crate::stats::sample_sd(outcomes);
        let pad = if sd > 0.0 { 3.0 * sd } else { 1.0 };
        Ok(Grid::Range {
            lo: lo - pad,
            hi: hi + pad,
            points: DEFAULT_GRID_POINTS,
        })
    }

    /// Ascending grid values.
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            Grid::Explicit(v) => {
                if v.is_empty() {
                    return Err(Error::config("herding grid is empty"));
                }
                if v.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite("herding grid"));
                }
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                Ok(v)
            }
            Grid::Range { lo, hi, points } => {
                if *points == 0 {
                    return Err(Error::config("herding grid is empty"));
                }
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::config(format!("herding range needs lo < hi, got [{lo}, {hi}]")));
                }
                if *points == 1 {
                    return Ok(vec![*lo]);
                }
                let step = (hi - lo) / (*points - 1) as f64;
                Ok((0..*points).map(|i| lo + step * i as f64).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdConfig {
    pub m: usize,
    pub grid: Grid,
    #[serde(default)]
    pub normalization: Normalization,
}

impl HerdConfig {
    pub fn new(m: usize, grid: Grid) -> Self {
        Self {
            m,
            grid,
            normalization: Normalization::Step,
        }
    }
}

/// `chi(y) - c_t sum_l k(y_l, y)` with `t = |history| + 1`.
pub fn herd_objective(
    chi: &EmbeddingFunctional,
    history: &[f64],
    y: f64,
    normalization: Normalization,
) -> f64 {
    let t = history.len() + 1;
    let s: f64 = history.iter().map(|h| chi.ky.eval_scalar(*h, y)).sum();
    chi.eval(y) - normalization.factor(t) * s
}

/// `m` herded outcomes. Each step maximizes the objective over the grid,
/// breaking ties toward the smallest grid value.
pub fn herd(chi: &EmbeddingFunctional, cfg: &HerdConfig) -> Result<Vec<f64>> {
    if cfg.m == 0 {
        return Err(Error::config("herding needs m >= 1"));
    }
    let grid = cfg.grid.values()?;
    let target: Vec<f64> = grid.iter().map(|g| chi.eval(*g)).collect();
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding on the herding grid"));
    }
    let mut running = vec![0.0; grid.len()];
    let mut out = Vec::with_capacity(cfg.m);
    for t in 1..=cfg.m {
        let c = cfg.normalization.factor(t);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (g, (tv, rs)) in target.iter().zip(&running).enumerate() {
            let v = tv - c * rs;
            if v > best_val {
                best_val = v;
                best = g;
            }
        }
        let y = grid[best];
        out.push(y);
        for (r, g) in running.iter_mut().zip(&grid) {
            *r += chi.ky.eval_scalar(y, *g);
        }
    }
    Ok(out)
}

/// `(1/m) sum_t phi_Y(y_t)`, keeping duplicates as separate atoms.
pub fn empirical_embedding(samples: &[f64], ky: KernelSpec) -> Result<EmbeddingFunctional> {
    if samples.is_empty() {
        return Err(Error::config("empirical embedding needs samples"));
    }
    let w = 1.0 / samples.len() as f64;
    EmbeddingFunctional::new(samples.to_vec(), vec![w; samples.len()], ky)
}

/// `t,y_tilde` rows with `t` starting at 1.
pub fn write_samples_csv<W: Write>(samples: &[f64], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "y_tilde"])?;
    for (t, y) in samples.iter().enumerate() {
        wtr.write_record([(t + 1).to_string(), format!("{y:?}")])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream_rng;
    use rand::Rng;

    fn gauss(l: f64) -> KernelSpec {
        KernelSpec::gaussian(l).unwrap()
    }

    #[test]
    fn single_step_is_grid_argmax() {
        let chi = EmbeddingFunctional::new(vec![0.3, 1.7], vec![0.4, 0.9], gauss(0.5)).unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -1.0 + 0.1 * i as f64).collect();
        let s = herd(&chi, &HerdConfig::new(1, Grid::Explicit(grid.clone()))).unwrap();
        let best = grid
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |acc, g| {
                let v = chi.eval(g);
                if v > acc.1 { (g, v) } else { acc }
            })
            .0;
        assert_eq!(s, vec![best]);
    }

    #[test]
    fn single_atom_peak() {
        let chi = EmbeddingFunctional::new(vec![0.5], vec![1.0], gauss(1.0)).unwrap();
        let grid = Grid::Range { lo: -2.0, hi: 3.0, points: 11 };
        assert_eq!(herd(&chi, &HerdConfig::new(1, grid)).unwrap(), vec![0.5]);
    }

    #[test]
    fn matches_brute_force_scan() {
        let chi = EmbeddingFunctional::new(vec![-0.4, 1.1], vec![0.6, 0.5], gauss(0.7)).unwrap();
        let grid: Vec<f64> = (0..11).map(|i| -1.0 + 0.3 * i as f64).collect();
        let got = herd(&chi, &HerdConfig::new(3, Grid::Explicit(grid.clone()))).unwrap();
        let mut hist: Vec<f64> = Vec::new();
        for _ in 0..3 {
            let t = hist.len() as f64 + 1.0;
            let mut best = (grid[0], f64::NEG_INFINITY);
            for &g in &grid {
                let mut v = 0.0;
                for (a, c) in chi.atoms.iter().zip(&chi.coeffs) {
                    v += c * (-(a - g).powi(2) / (2.0 * 0.49)).exp();
                }
                for h in &hist {
                    v -= (-(h - g).powi(2) / (2.0 * 0.49)).exp() / t;
                }
                if v > best.1 {
                    best = (g, v);
                }
            }
            hist.push(best.0);
        }
        assert_eq!(got, hist);
    }

    #[test]
    fn objective_examples() {
        let chi = EmbeddingFunctional::new(vec![0.0, 1.0], vec![0.5, 0.25], gauss(1.0)).unwrap();
        assert_eq!(herd_objective(&chi, &[], 0.3, Normalization::Step), chi.eval(0.3));
        assert!((herd_objective(&chi, &[0.3], 0.3, Normalization::Step) - (chi.eval(0.3) - 0.5)).abs() < 1e-15);
        let mut rng = stream_rng(2, 2);
        let hist: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..2.0)).collect();
        let y = 0.77;
        let mut expect = chi.eval(y);
        for h in &hist {
            expect -= (-(h - y) * (h - y) / 2.0).exp() / 6.0;
        }
        assert!((herd_objective(&chi, &hist, y, Normalization::Step) - expect).abs() < 1e-12);
        let mut alt = chi.eval(y);
        for h in &hist {
            alt -= (-(h - y) * (h - y) / 2.0).exp() / 5.0;
        }
        assert!((herd_objective(&chi, &hist, y, Normalization::PreviousCount) - alt).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_smallest_value() {
        // symmetric target about zero: the two peaks tie after the first pick
        let chi = EmbeddingFunctional::new(vec![-1.0, 1.0], vec![0.5, 0.5], gauss(0.3)).unwrap();
        let s = herd(&chi, &HerdConfig::new(1, Grid::Explicit(vec![1.0, -1.0, 0.0]))).unwrap();
        assert_eq!(s, vec![-1.0]);
    }

    #[test]
    fn outputs_on_grid_and_deterministic() {
        let chi = EmbeddingFunctional::new(vec![-0.2, 0.9, 2.0], vec![0.2, 0.5, 0.3], gauss(0.6)).unwrap();
        let cfg = HerdConfig::new(40, Grid::Range { lo: -3.0, hi: 5.0, points: 101 });
        let a = herd(&chi, &cfg).unwrap();
        let b = herd(&chi, &cfg).unwrap();
        assert_eq!(a, b);
        let grid = cfg.grid.values().unwrap();
        assert!(a.iter().all(|y| grid.contains(y)));
        assert!(herd(&chi, &HerdConfig::new(3, Grid::Explicit(vec![]))).is_err());
    }

    #[test]
    fn empirical_embedding_examples() {
        let e = empirical_embedding(&[0.4], gauss(1.0)).unwrap();
        assert_eq!(e.coeffs, vec![1.0]);
        let e = empirical_embedding(&[0.4, 0.4, 1.0], gauss(1.0)).unwrap();
        assert_eq!(e.coeffs, vec![1.0 / 3.0; 3]);
        assert_eq!(e.atoms.len(), 3);
    }

    #[test]
    fn samples_csv_header() {
        let mut buf = Vec::new();
        write_samples_csv(&[0.5, -1.25], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,y_tilde\n1,0.5\n2,-1.25\n");
    }
}
