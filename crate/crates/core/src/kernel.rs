//! Reproducible Brownian and Poisson noise, particle ensembles and empirical
//! means.
//!
//! Every draw is keyed by `(seed, step, particle, channel)` through the
//! stream and word position of a ChaCha8 generator, so the noise does not
//! depend on iteration order or thread count.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::{JumpMeasure, TimeGrid};

/// Discretized noise for `N` particles on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements {
    grid: TimeGrid,
    particles: usize,
    weights: Vec<f64>,
    seed: u64,
    /// `dw[i][p]`, `i < M`.
    dw: Vec<Vec<f64>>,
    /// `counts[i][p * K + k]`, `i < M`.
    counts: Vec<Vec<u32>>,
    /// Cumulative `W(s_i)`, `i <= M`.
    w: Vec<Vec<f64>>,
    /// Cumulative compensated counts `Ñ_k(s_i)`, `i <= M`.
    ntilde: Vec<Vec<f64>>,
}

impl NoiseIncrements {
    fn from_parts(
        grid: TimeGrid,
        particles: usize,
        weights: Vec<f64>,
        seed: u64,
        dw: Vec<Vec<f64>>,
        counts: Vec<Vec<u32>>,
    ) -> Self {
        let k = weights.len();
        let h = grid.step();
        let steps = grid.steps();
        let mut w = Vec::with_capacity(steps + 1);
        let mut ntilde = Vec::with_capacity(steps + 1);
        w.push(vec![0.0; particles]);
        ntilde.push(vec![0.0; particles * k]);
        for i in 0..steps {
            let next_w: Vec<f64> = w[i].iter().zip(&dw[i]).map(|(a, b)| a + b).collect();
            let next_n: Vec<f64> = ntilde[i]
                .iter()
                .zip(&counts[i])
                .enumerate()
                .map(|(j, (a, c))| a + (*c as f64 - weights[j % k] * h))
                .collect();
            w.push(next_w);
            ntilde.push(next_n);
        }
        Self {
            grid,
            particles,
            weights,
            seed,
            dw,
            counts,
            w,
            ntilde,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn marks(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Brownian increments over `[s_i, s_{i+1}]`, one per particle.
    pub fn dw(&self, i: usize) -> &[f64] {
        &self.dw[i]
    }

    /// Jump counts in `(s_i, s_{i+1}]`, laid out as `p * K + k`.
    pub fn counts(&self, i: usize) -> &[u32] {
        &self.counts[i]
    }

    /// Compensated count `counts - ν_k h` of mark `k` for particle `p`.
    pub fn compensated(&self, i: usize, p: usize, k: usize) -> f64 {
        self.counts[i][p * self.weights.len() + k] as f64 - self.weights[k] * self.grid.step()
    }

    /// `W(s_i)` per particle.
    pub fn brownian(&self, i: usize) -> &[f64] {
        &self.w[i]
    }

    /// `Ñ_k(s_i)` per particle, laid out as `p * K + k`.
    pub fn compensated_path(&self, i: usize) -> &[f64] {
        &self.ntilde[i]
    }
}

fn draw_rng(base: &ChaCha8Rng, marks: usize, i: usize, p: usize, channel: usize) -> ChaCha8Rng {
    let mut rng = base.clone();
    rng.set_stream(p as u64);
    rng.set_word_pos(((i * (marks + 1) + channel) as u128) << 32);
    rng
}

pub fn generate_noise(grid: &TimeGrid, particles: usize, jumps: &JumpMeasure, seed: u64) -> Result<NoiseIncrements> {
    if particles == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let h = grid.step();
    let k = jumps.len();
    let base = ChaCha8Rng::seed_from_u64(seed);
    let normal =
        Normal::new(0.0, h.sqrt()).map_err(|e| Error::InvalidArgument(format!("normal increment law: {e}")))?;
    let poisson = jumps
        .weights()
        .iter()
        .map(|nu| Poisson::new(nu * h).map_err(|e| Error::InvalidArgument(format!("Poisson increment law: {e}"))))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..grid.steps())
        .into_par_iter()
        .map(|i| {
            let mut dw = Vec::with_capacity(particles);
            let mut counts = Vec::with_capacity(particles * k);
            for p in 0..particles {
                dw.push(normal.sample(&mut draw_rng(&base, k, i, p, 0)));
                for (mark, law) in poisson.iter().enumerate() {
                    let c: f64 = law.sample(&mut draw_rng(&base, k, i, p, mark + 1));
                    counts.push(c as u32);
                }
            }
            (dw, counts)
        })
        .collect();
    let (dw, counts) = rows.into_iter().unzip();
    Ok(NoiseIncrements::from_parts(
        grid.clone(),
        particles,
        jumps.weights().to_vec(),
        seed,
        dw,
        counts,
    ))
}

/// `counts_k - ν_k h` for every mark.
pub fn compensated_increment(counts: &[u32], jumps: &JumpMeasure, h: f64) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    if counts.len() != jumps.len() {
        return Err(Error::Dimension(format!(
            "{} counts for {} marks",
            counts.len(),
            jumps.len()
        )));
    }
    Ok(counts
        .iter()
        .zip(jumps.weights())
        .map(|(c, nu)| *c as f64 - nu * h)
        .collect())
}

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise sum of `values[start + j * stride]` for `j in 0..len`, minus
/// `shift` per term.
fn pairwise(values: &[f64], start: usize, stride: usize, len: usize, shift: f64) -> f64 {
    if len <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for j in 0..len {
            acc += values[start + j * stride] - shift;
        }
        return acc;
    }
    let half = len / 2;
    pairwise(values, start, stride, half, shift) + pairwise(values, start + half * stride, stride, len - half, shift)
}

/// Componentwise mean of `N` particles stored as `p * dim + c`.
///
/// The sum runs over deviations from the first particle in a fixed pairwise
/// order, so identical particles give their common value exactly and the
/// result never depends on the thread count.
pub fn empirical_mean(values: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Ok(Vec::new());
    }
    let n = values.len() / dim;
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if values.len() != n * dim {
        return Err(Error::Dimension(format!(
            "{} values are not a multiple of dimension {dim}",
            values.len()
        )));
    }
    Ok((0..dim)
        .map(|c| {
            let x0 = values[c];
            x0 + pairwise(values, c, dim, n, x0) / n as f64
        })
        .collect())
}

/// Per-node particle values with their empirical means.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    particles: usize,
    dim: usize,
    values: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
}

impl PathEnsemble {
    pub fn zeros(grid: &TimeGrid, particles: usize, dim: usize) -> Self {
        let nodes = grid.steps() + 1;
        Self {
            grid: grid.clone(),
            particles,
            dim,
            values: vec![vec![0.0; particles * dim]; nodes],
            mean: vec![vec![0.0; dim]; nodes],
        }
    }

    pub fn from_rows(grid: &TimeGrid, particles: usize, dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != grid.steps() + 1 {
            return Err(Error::Dimension(format!(
                "{} rows for {} nodes",
                rows.len(),
                grid.steps() + 1
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != particles * dim) {
            return Err(Error::Dimension(format!(
                "row of length {} for {particles} particles of dimension {dim}",
                r.len()
            )));
        }
        let mean = rows
            .iter()
            .map(|r| empirical_mean(r, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            particles,
            dim,
            values: rows,
            mean,
        })
    }

    pub(crate) fn set_row(&mut self, i: usize, row: Vec<f64>) -> Result<()> {
        debug_assert_eq!(row.len(), self.particles * self.dim);
        self.mean[i] = empirical_mean(&row, self.dim)?;
        self.values[i] = row;
        Ok(())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.values.len()
    }

    /// All particles at node `i`, laid out as `p * dim + c`.
    pub fn values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn particle(&self, i: usize, p: usize) -> &[f64] {
        &self.values[i][p * self.dim..(p + 1) * self.dim]
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.mean[i]
    }

    /// `sqrt(mean_p |x_p(s_i)|^2)`.
    pub fn rms(&self, i: usize) -> f64 {
        (self.values[i].iter().map(|v| v * v).sum::<f64>() / self.particles as f64).sqrt()
    }

    pub fn sup_rms(&self) -> f64 {
        (0..self.nodes()).map(|i| self.rms(i)).fold(0.0, f64::max)
    }

    /// `sup_i sqrt(mean_p |x_p(s_i) - y_p(s_i)|^2)`.
    pub fn sup_rms_distance(&self, other: &PathEnsemble) -> Result<f64> {
        if self.particles != other.particles || self.dim != other.dim || self.nodes() != other.nodes() {
            return Err(Error::Dimension("ensembles do not share a layout".into()));
        }
        Ok((0..self.nodes())
            .map(|i| {
                let s: f64 = self.values[i]
                    .iter()
                    .zip(&other.values[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (s / self.particles as f64).sqrt()
            })
            .fold(0.0, f64::max))
    }

    /// Largest absolute entry over all nodes and particles.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |a: f64, v| a.max(v.abs()))
    }

    /// True when every particle carries the same value at every node.
    pub fn is_particle_independent(&self) -> bool {
        self.values.iter().all(|row| {
            let first = &row[..self.dim];
            row.chunks(self.dim).all(|c| c == first)
        })
    }

    /// `x_p(s_i) - E[x(s_i)]` for every particle.
    pub fn centered(&self, i: usize) -> Vec<f64> {
        let m = &self.mean[i];
        self.values[i]
            .iter()
            .enumerate()
            .map(|(j, v)| v - m[j % self.dim])
            .collect()
    }
}

const DUMP_MAGIC: &[u8; 8] = b"MFLQNOIS";

/// Writes the noise as: magic, `(seed, M, N, K)` as little-endian `u64`,
/// then `dW[i][p]` and `counts[i][p][k]` as little-endian `f64`, row-major.
pub fn write_noise(noise: &NoiseIncrements, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(40 + 8 * noise.grid.steps() * noise.particles * (1 + noise.marks()));
    out.extend_from_slice(DUMP_MAGIC);
    for v in [
        noise.seed,
        noise.grid.steps() as u64,
        noise.particles as u64,
        noise.marks() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for row in &noise.dw {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in &noise.counts {
        for c in row {
            out.extend_from_slice(&(*c as f64).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a dump written by [`write_noise`]. The grid and intensities are not
/// stored and must match the ones used when generating.
pub fn read_noise(path: impl AsRef<Path>, grid: &TimeGrid, jumps: &JumpMeasure) -> Result<NoiseIncrements> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::parse(path.display().to_string(), msg);
    if bytes.len() < 40 || &bytes[..8] != DUMP_MAGIC {
        return Err(bad("not a noise dump"));
    }
    let word = |j: usize| u64::from_le_bytes(bytes[8 + 8 * j..16 + 8 * j].try_into().unwrap());
    let (seed, steps, particles, marks) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if steps != grid.steps() || marks != jumps.len() {
        return Err(bad("dump does not match the grid or the mark count"));
    }
    let expected = 40 + 8 * steps * particles * (1 + marks);
    if bytes.len() != expected {
        return Err(bad("truncated noise dump"));
    }
    let mut floats = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let dw = (0..steps).map(|_| floats.by_ref().take(particles).collect()).collect();
    let counts = (0..steps)
        .map(|_| floats.by_ref().take(particles * marks).map(|c| c as u32).collect())
        .collect();
    Ok(NoiseIncrements::from_parts(
        grid.clone(),
        particles,
        jumps.weights().to_vec(),
        seed,
        dw,
        counts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_grid, TimeHorizon};

    fn grid(steps: usize) -> TimeGrid {
        build_grid(&TimeHorizon::new(0.0, 1.0).unwrap(), steps).unwrap()
    }

    #[test]
    fn no_marks() {
        let n = generate_noise(&grid(4), 3, &JumpMeasure::none(), 1).unwrap();
        assert_eq!(n.marks(), 0);
        assert!(n.counts(0).is_empty());
        assert_eq!(n.dw(3).len(), 3);
    }

    #[test]
    fn regeneration_is_identical() {
        let jumps = JumpMeasure::with_weights(vec![1.0, 3.0]).unwrap();
        let a = generate_noise(&grid(5), 7, &jumps, 99).unwrap();
        let b = generate_noise(&grid(5), 7, &jumps, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_noise(&grid(5), 7, &jumps, 100).unwrap();
        assert_ne!(a.dw(0), c.dw(0));
    }

    #[test]
    fn particle_draws_do_not_depend_on_ensemble_size() {
        let jumps = JumpMeasure::with_weights(vec![2.0]).unwrap();
        let small = generate_noise(&grid(3), 4, &jumps, 5).unwrap();
        let large = generate_noise(&grid(3), 40, &jumps, 5).unwrap();
        assert_eq!(small.dw(2), &large.dw(2)[..4]);
        assert_eq!(small.counts(1), &large.counts(1)[..4]);
    }

    #[test]
    fn compensation() {
        let one = JumpMeasure::with_weights(vec![3.0]).unwrap();
        assert!((compensated_increment(&[0], &one, 0.1).unwrap()[0] + 0.3).abs() < 1e-15);
        let ten = JumpMeasure::with_weights(vec![10.0]).unwrap();
        assert_eq!(compensated_increment(&[1], &ten, 0.1).unwrap()[0], 0.0);
        assert!(compensated_increment(&[1], &ten, 0.0).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(empirical_mean(&[1.0, 3.0], 1).unwrap(), vec![2.0]);
        let same = vec![0.1; 1001];
        assert_eq!(empirical_mean(&same, 1).unwrap(), vec![0.1]);
        assert!(matches!(empirical_mean(&[], 1), Err(Error::EmptyEnsemble)));
        assert_eq!(empirical_mean(&[1.0, 10.0, 3.0, 20.0], 2).unwrap(), vec![2.0, 15.0]);
    }

    #[test]
    fn dump_round_trip() {
        let jumps = JumpMeasure::with_weights(vec![1.5, 0.5]).unwrap();
        let g = grid(6);
        let a = generate_noise(&g, 9, &jumps, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("mflq-noise-{}", std::process::id()));
        write_noise(&a, &dir).unwrap();
        let b = read_noise(&dir, &g, &jumps).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(a, b);
    }

    #[test]
    fn ensemble_means_and_centering() {
        let g = grid(2);
        let rows = vec![vec![1.0, 3.0], vec![0.0, 0.0], vec![2.0, 2.0]];
        let e = PathEnsemble::from_rows(&g, 2, 1, rows).unwrap();
        assert_eq!(e.mean(0), &[2.0]);
        assert_eq!(e.centered(0), vec![-1.0, 1.0]);
        assert!(!e.is_particle_independent());
    }
}
