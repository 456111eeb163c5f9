//! Least-squares projection onto polynomials of the particle state, used as
//! the conditional expectation in the backward solvers.
//!
//! Variables are standardized, zero-variance variables are dropped, and the
//! basis holds all monomials up to a total degree. Optionally every monomial
//! is repeated once per multiplier (e.g. a noise increment), giving one block
//! of coefficients per multiplier. Linearly dependent columns are dropped
//! during a greedy Cholesky factorization of the Gram matrix. Reductions run
//! over fixed particle chunks summed in order, so the fit never depends on
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 512;
const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Projector {
    particles: usize,
    /// Monomials per block.
    nm: usize,
    /// Unmultiplied monomial values, `p * nm + j`.
    monos: Vec<f64>,
    /// Kept columns as `block * nm + j`.
    kept: Vec<usize>,
    /// Design values of the kept columns, `p * nb + c`.
    design: Vec<f64>,
    /// Lower Cholesky factor of the kept Gram matrix, row-major.
    chol: Vec<f64>,
    degraded: bool,
}

/// Monomials (as lists of variable indices) of total degree `<= degree`.
fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..degree {
        let mut next = Vec::new();
        for mono in &frontier {
            let start = mono.last().copied().unwrap_or(0);
            for v in start..vars {
                let mut m = mono.clone();
                m.push(v);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl Projector {
    /// `raw` holds `vars` explanatory variables per particle (`p * vars + v`).
    pub fn new(raw: &[f64], vars: usize, particles: usize, degree: usize) -> Result<Self> {
        Self::with_multipliers(raw, vars, 0, particles, degree, &[], 0)
    }

    /// Like [`Projector::new`], but the last `tail` variables only enter
    /// linearly, and the basis is repeated once per multiplier: the columns
    /// are `monomial` and `multiplier_b * monomial` for `b < nmult`, with
    /// `multipliers[p * nmult + b]`.
    pub fn with_multipliers(
        raw: &[f64],
        vars: usize,
        tail: usize,
        particles: usize,
        degree: usize,
        multipliers: &[f64],
        nmult: usize,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if raw.len() != vars * particles || multipliers.len() != nmult * particles {
            return Err(Error::Dimension(format!(
                "{} regressor values and {} multipliers for {particles} particles",
                raw.len(),
                multipliers.len()
            )));
        }
        if tail > vars {
            return Err(Error::Dimension(format!("{tail} linear variables out of {vars}")));
        }
        // Standardize, dropping variables without spread.
        let mut centers = Vec::new();
        let mut scales = Vec::new();
        let mut used = Vec::new();
        for v in 0..vars {
            let col = (0..particles).map(|p| raw[p * vars + v]);
            let mean = col.clone().sum::<f64>() / particles as f64;
            let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / particles as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                used.push(v);
                centers.push(mean);
                scales.push(sd);
            }
        }
        let head = used.iter().filter(|&&v| v < vars - tail).count();
        let mut shapes = monomials(head, degree);
        if degree > 0 {
            shapes.extend((head..used.len()).map(|j| vec![j]));
        }
        let nm = shapes.len();
        let blocks = 1 + nmult;
        let full = nm * blocks;

        let mut monos = vec![0.0; particles * nm];
        let mut design = vec![0.0; particles * full];
        monos
            .par_chunks_mut(CHUNK * nm)
            .zip(design.par_chunks_mut(CHUNK * full))
            .enumerate()
            .for_each(|(c, (mchunk, dchunk))| {
                let mut z = vec![0.0; used.len()];
                for (q, (mrow, drow)) in mchunk.chunks_mut(nm).zip(dchunk.chunks_mut(full)).enumerate() {
                    let p = c * CHUNK + q;
                    for (j, &v) in used.iter().enumerate() {
                        z[j] = (raw[p * vars + v] - centers[j]) / scales[j];
                    }
                    for (j, m) in shapes.iter().enumerate() {
                        mrow[j] = m.iter().map(|&v| z[v]).product();
                    }
                    drow[..nm].copy_from_slice(mrow);
                    for b in 0..nmult {
                        let f = multipliers[p * nmult + b];
                        for j in 0..nm {
                            drow[(b + 1) * nm + j] = f * mrow[j];
                        }
                    }
                }
            });
        let gram = chunked_sum(
            &design,
            full,
            |row, acc| {
                for a in 0..full {
                    let ra = row[a];
                    for b in a..full {
                        acc[a * full + b] += ra * row[b];
                    }
                }
            },
            full * full,
        );

        // Greedy Cholesky over the candidate columns.
        let g = |a: usize, b: usize| if a <= b { gram[a * full + b] } else { gram[b * full + a] };
        let mut kept: Vec<usize> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for j in 0..full {
            let mut l = Vec::with_capacity(kept.len() + 1);
            for (r, &kr) in kept.iter().enumerate() {
                let s: f64 = (0..r).map(|t| rows[r][t] * l[t]).sum();
                l.push((g(kr, j) - s) / rows[r][r]);
            }
            let v = g(j, j) - l.iter().map(|x| x * x).sum::<f64>();
            if g(j, j) > 0.0 && v > PIVOT_TOL * g(j, j) {
                l.push(v.sqrt());
                rows.push(l);
                kept.push(j);
            }
        }
        let nb = kept.len();
        let degraded = nb < full;
        let mut chol = vec![0.0; nb * nb];
        for (r, row) in rows.iter().enumerate() {
            chol[r * nb..r * nb + row.len()].copy_from_slice(row);
        }
        let design = if degraded {
            design
                .chunks(full)
                .flat_map(|row| kept.iter().map(move |&j| row[j]))
                .collect()
        } else {
            design
        };
        Ok(Self {
            particles,
            nm,
            monos,
            kept,
            design,
            chol,
            degraded,
        })
    }

    /// True when some column was dropped as linearly dependent.
    pub fn degraded(&self) -> bool {
        self.degraded
    }

    pub fn basis_size(&self) -> usize {
        self.kept.len()
    }

    /// Least-squares coefficients of `targets` (`q` columns), `c * q + b`
    /// over the kept columns.
    fn coefficients(&self, targets: &[f64], q: usize) -> Vec<f64> {
        debug_assert_eq!(targets.len(), self.particles * q);
        let nb = self.kept.len();
        let n = self.particles;
        let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; nb * q];
                for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let row = &self.design[p * nb..(p + 1) * nb];
                    let t = &targets[p * q..(p + 1) * q];
                    for a in 0..nb {
                        for b in 0..q {
                            acc[a * q + b] += row[a] * t[b];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut coef = vec![0.0; nb * q];
        for c in chunks {
            for (t, v) in coef.iter_mut().zip(c) {
                *t += v;
            }
        }
        // Solve L Lᵀ coef = rhs column by column.
        let l = |r: usize, c: usize| self.chol[r * nb + c];
        for b in 0..q {
            for r in 0..nb {
                let s: f64 = (0..r).map(|t| l(r, t) * coef[t * q + b]).sum();
                coef[r * q + b] = (coef[r * q + b] - s) / l(r, r);
            }
            for r in (0..nb).rev() {
                let s: f64 = (r + 1..nb).map(|t| l(t, r) * coef[t * q + b]).sum();
                coef[r * q + b] = (coef[r * q + b] - s) / l(r, r);
            }
        }
        coef
    }

    /// Fitted values of the least-squares projection of `targets`
    /// (`q` columns, `p * q + c`).
    pub fn project(&self, targets: &[f64], q: usize) -> Vec<f64> {
        let coef = self.coefficients(targets, q);
        let nb = self.kept.len();
        let mut out = vec![0.0; self.particles * q];
        out.par_chunks_mut(CHUNK * q).enumerate().for_each(|(c, chunk)| {
            for (j, o) in chunk.chunks_mut(q).enumerate() {
                let p = c * CHUNK + j;
                let row = &self.design[p * nb..(p + 1) * nb];
                for b in 0..q {
                    o[b] = (0..nb).map(|a| row[a] * coef[a * q + b]).sum();
                }
            }
        });
        out
    }

    /// Fits `targets` and evaluates each block's coefficient function
    /// without its multiplier: entry `b` holds `p * q + c` for block `b`
    /// (block 0 is the plain basis).
    pub fn project_blocks(&self, targets: &[f64], q: usize, blocks: usize) -> Vec<Vec<f64>> {
        let coef = self.coefficients(targets, q);
        let nm = self.nm;
        (0..blocks)
            .map(|blk| {
                let cols: Vec<(usize, usize)> = self
                    .kept
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| k / nm == blk)
                    .map(|(c, &k)| (c, k % nm))
                    .collect();
                let mut out = vec![0.0; self.particles * q];
                out.par_chunks_mut(CHUNK * q).enumerate().for_each(|(c, chunk)| {
                    for (j, o) in chunk.chunks_mut(q).enumerate() {
                        let p = c * CHUNK + j;
                        let m = &self.monos[p * nm..(p + 1) * nm];
                        for b in 0..q {
                            o[b] = cols.iter().map(|&(col, mj)| m[mj] * coef[col * q + b]).sum();
                        }
                    }
                });
                out
            })
            .collect()
    }
}

/// Sums `f(row)` over `CHUNK`-sized particle blocks in a fixed order.
fn chunked_sum(basis: &[f64], width: usize, f: impl Fn(&[f64], &mut [f64]) + Sync, len: usize) -> Vec<f64> {
    let partial: Vec<Vec<f64>> = basis
        .par_chunks(CHUNK * width)
        .map(|chunk| {
            let mut acc = vec![0.0; len];
            for row in chunk.chunks(width) {
                f(row, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for c in partial {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(0, 2).len(), 1);
        assert_eq!(monomials(2, 3).len(), 10);
    }

    #[test]
    fn reproduces_targets_in_the_span() {
        let n = 200;
        let raw: Vec<f64> = (0..n).map(|p| (p as f64 * 0.37).sin()).collect();
        let proj = Projector::new(&raw, 1, n, 2).unwrap();
        let targets: Vec<f64> = raw.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let fit = proj.project(&targets, 1);
        for (a, b) in fit.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(!proj.degraded());
    }

    #[test]
    fn constant_variable_is_dropped_without_degradation() {
        let raw = vec![3.0; 10];
        let proj = Projector::new(&raw, 1, 10, 2).unwrap();
        assert_eq!(proj.basis_size(), 1);
        assert!(!proj.degraded());
        let fit = proj.project(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0], 1);
        assert!(fit.iter().all(|v| (v - 5.5).abs() < 1e-12));
    }

    #[test]
    fn blocks_recover_increment_loadings() {
        let n = 400;
        let raw: Vec<f64> = (0..n).map(|p| (p as f64 * 0.61).sin()).collect();
        let inc: Vec<f64> = (0..n).map(|p| (p as f64 * 1.37).cos()).collect();
        let targets: Vec<f64> = (0..n).map(|p| 1.0 + raw[p] + (2.0 - raw[p]) * inc[p]).collect();
        let proj = Projector::with_multipliers(&raw, 1, 0, n, 1, &inc, 1).unwrap();
        let blocks = proj.project_blocks(&targets, 1, 2);
        for p in 0..n {
            assert!((blocks[0][p] - 1.0 - raw[p]).abs() < 1e-10);
            assert!((blocks[1][p] - 2.0 + raw[p]).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_tail_skips_products() {
        let n = 100;
        let raw: Vec<f64> = (0..n)
            .flat_map(|p| [(p as f64).sin(), (p as f64 * 0.3).cos()])
            .collect();
        let proj = Projector::with_multipliers(&raw, 2, 1, n, 2, &[], 0).unwrap();
        assert_eq!(proj.basis_size(), 4);
    }

    #[test]
    fn duplicate_variable_degrades_basis() {
        let n = 50;
        let mut raw = Vec::new();
        for p in 0..n {
            let x = p as f64;
            raw.push(x);
            raw.push(2.0 * x + 1.0);
        }
        let proj = Projector::new(&raw, 2, n, 2).unwrap();
        assert!(proj.degraded());
        assert_eq!(proj.basis_size(), 3);
    }
}
