//! Counter-based Gaussian increments. Every draw is a pure function of
//! `(master_seed, path_index, line, step)`, so paths can be replayed and
//! distributed over threads in any order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent noise lines of a path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Line {
    Slow = 0,
    Fast = 1,
    /// Extra line for auxiliary samplers (initial conditions, replicas).
    Aux = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WienerDriver {
    pub master_seed: u64,
    pub path_index: u64,
    pub n_modes_slow: usize,
    pub n_modes_fast: usize,
}

impl WienerDriver {
    pub fn new(master_seed: u64, path_index: u64, n_modes_slow: usize, n_modes_fast: usize) -> Self {
        Self {
            master_seed,
            path_index,
            n_modes_slow,
            n_modes_fast,
        }
    }

    pub fn with_path(&self, path_index: u64) -> Self {
        Self { path_index, ..*self }
    }

    pub fn stream(&self, line: Line) -> NormalStream {
        let width = match line {
            Line::Slow => self.n_modes_slow,
            Line::Fast => self.n_modes_fast,
            Line::Aux => self.n_modes_slow.max(self.n_modes_fast),
        };
        NormalStream::new(self.master_seed, self.path_index, line as u64, width)
    }

    /// Standard normal draws for `(line, step)`; `out.len()` must not exceed the line width.
    pub fn normals(&self, line: Line, step: u64, out: &mut [f64]) {
        self.stream(line).fill(step, out);
    }
}

/// Standard normals per step, read from a ChaCha stream keyed by `(master_seed, path_index)`
/// with the line as stream id. Each step owns a fixed budget of `width + 2` words of 64 bits,
/// so steps can be addressed directly. The ziggurat sampler almost always needs one word per
/// normal; the rare step that exhausts its budget continues on a private stream keyed by the step.
pub struct NormalStream {
    rng: ChaCha8Rng,
    master_seed: u64,
    path_index: u64,
    line: u64,
    width: usize,
    budget: usize,
    next_step: u64,
}

impl NormalStream {
    pub fn new(master_seed: u64, path_index: u64, line: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key(master_seed, path_index, 0, 0));
        rng.set_stream(line);
        Self {
            rng,
            master_seed,
            path_index,
            line,
            width,
            budget: width + 2,
            next_step: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fills `out` with the normals of `step`. Sequential calls avoid re-seeking.
    pub fn fill(&mut self, step: u64, out: &mut [f64]) {
        debug_assert!(out.len() <= self.width.max(1));
        if step != self.next_step {
            // positions count 32-bit words
            self.rng.set_word_pos(step as u128 * 2 * self.budget as u128);
        }
        let mut words = StepWords {
            rng: &mut self.rng,
            left: self.budget,
            overflow: None,
            tag: (self.master_seed, self.path_index, self.line, step),
        };
        for o in out.iter_mut() {
            *o = StandardNormal.sample(&mut words);
        }
        for _ in 0..words.left {
            words.rng.next_u64();
        }
        self.next_step = step + 1;
    }
}

fn key(master_seed: u64, path_index: u64, a: u64, b: u64) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&master_seed.to_le_bytes());
    k[8..16].copy_from_slice(&path_index.to_le_bytes());
    k[16..24].copy_from_slice(&a.to_le_bytes());
    k[24..].copy_from_slice(&b.to_le_bytes());
    k
}

struct StepWords<'a> {
    rng: &'a mut ChaCha8Rng,
    left: usize,
    overflow: Option<ChaCha8Rng>,
    tag: (u64, u64, u64, u64),
}

impl RngCore for StepWords<'_> {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }

    fn next_u64(&mut self) -> u64 {
        if self.left > 0 {
            self.left -= 1;
            return self.rng.next_u64();
        }
        let (seed, path, line, step) = self.tag;
        self.overflow
            .get_or_insert_with(|| {
                // the main streams use zero in the upper key half
                let mut r = ChaCha8Rng::from_seed(key(seed, path, line + 1, step));
                r.set_stream(u64::MAX);
                r
            })
            .next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let b = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replayable_and_random_access() {
        let d = WienerDriver::new(7, 3, 3, 2);
        let mut s = d.stream(Line::Slow);
        let mut seq = Vec::new();
        for step in 0..10 {
            let mut z = [0.0; 3];
            s.fill(step, &mut z);
            seq.push(z);
        }
        for step in [9u64, 0, 4] {
            let mut z = [0.0; 3];
            d.normals(Line::Slow, step, &mut z);
            assert_eq!(z, seq[step as usize]);
        }
    }

    #[test]
    fn lines_and_paths_differ() {
        let d = WienerDriver::new(7, 3, 2, 2);
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        d.normals(Line::Slow, 0, &mut a);
        d.normals(Line::Fast, 0, &mut b);
        assert_ne!(a, b);
        d.with_path(4).normals(Line::Slow, 0, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn moments_are_standard() {
        let d = WienerDriver::new(1, 0, 4, 1);
        let mut s = d.stream(Line::Slow);
        let n = 50_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        let mut z = [0.0; 4];
        for step in 0..n {
            s.fill(step, &mut z);
            for v in z {
                m1 += v;
                m2 += v * v;
                m4 += v.powi(4);
            }
        }
        let k = (4 * n) as f64;
        assert!((m1 / k).abs() < 4.0 / k.sqrt());
        assert!((m2 / k - 1.0).abs() < 0.02);
        assert!((m4 / k - 3.0).abs() < 0.1);
    }

    #[test]
    fn slow_and_fast_lines_uncorrelated() {
        let d = WienerDriver::new(11, 5, 1, 1);
        let mut s = d.stream(Line::Slow);
        let mut f = d.stream(Line::Fast);
        let n = 100_000u64;
        let (mut sxy, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut a, mut b) = ([0.0], [0.0]);
        for step in 0..n {
            s.fill(step, &mut a);
            f.fill(step, &mut b);
            sxy += a[0] * b[0];
            sx += a[0];
            sy += b[0];
            sxx += a[0] * a[0];
            syy += b[0] * b[0];
        }
        let nf = n as f64;
        let cov = sxy / nf - sx * sy / (nf * nf);
        let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        assert!(corr.abs() <= 4.0 / nf.sqrt(), "corr {corr}");
    }
}
