//! Streaming channel-wise percentiles of density embeddings and the tanh soft
//! clip fitted from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{Density, DensityEmbedding, DENSITY_CHANNELS};
use crate::error::{Error, Result};

/// Samples kept per channel.
pub const RESERVOIR_CAPACITY: usize = 1000;

/// Lower bound on the clip half-span so the clip never divides by zero.
pub const MIN_HALF_SPAN: f64 = 1e-8;

/// Fixed-capacity uniform sample of an unbounded stream (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    samples: Vec<f64>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "reservoir capacity must be positive");
        Self {
            capacity,
            samples: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, value: f64) {
        self.seen += 1;
        if self.samples.len() < self.capacity {
            self.samples.push(value);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.samples[j as usize] = value;
            }
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Nearest-rank percentile: the sorted sample at `ceil(p/100 * n) - 1`.
    pub fn percentile(&self, p: f64) -> Result<f64> {
        nearest_rank(&self.samples, p)
    }
}

/// Nearest-rank percentile of an unsorted slice; `p` in percent.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::NoStatistics);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.saturating_sub(1).min(n - 1)])
}

/// One reservoir per density channel.
#[derive(Debug, Clone)]
pub struct ReservoirState {
    pub seed: u64,
    channels: Vec<Reservoir>,
}

impl ReservoirState {
    pub fn new(seed: u64) -> Self {
        Self::with_capacity(RESERVOIR_CAPACITY, seed)
    }

    pub fn with_capacity(capacity: usize, seed: u64) -> Self {
        let channels = (0..DENSITY_CHANNELS as u64)
            .map(|c| Reservoir::new(capacity, seed.wrapping_add(c.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
            .collect();
        Self { seed, channels }
    }

    pub fn channel(&self, c: usize) -> &Reservoir {
        &self.channels[c]
    }

    pub fn seen_count(&self) -> [u64; DENSITY_CHANNELS] {
        std::array::from_fn(|c| self.channels[c].seen())
    }

    /// Streams every row of `embedding` through the per-channel reservoirs.
    /// The whole batch is checked first so a rejected batch leaves the state
    /// untouched.
    pub fn update(&mut self, embedding: &DensityEmbedding) -> Result<()> {
        self.update_rows(&embedding.values)
    }

    pub fn update_rows(&mut self, rows: &[Density]) -> Result<()> {
        if let Some(index) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::at_point(index, Error::NonFiniteDensity));
        }
        for row in rows {
            for (res, &v) in self.channels.iter_mut().zip(row) {
                res.push(v);
            }
        }
        Ok(())
    }

    pub fn percentile(&self, p: f64) -> Result<Density> {
        let mut out = [0.0; DENSITY_CHANNELS];
        for (o, res) in out.iter_mut().zip(&self.channels) {
            *o = res.percentile(p)?;
        }
        Ok(out)
    }

    pub fn fit_clip(&self) -> Result<ClipParams> {
        Ok(ClipParams::from_percentiles(
            self.percentile(10.0)?,
            self.percentile(90.0)?,
        ))
    }
}

/// Center `m` and half-span `l` of the tanh soft clip, per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub mid: Density,
    pub half_span: Density,
    pub p10: Density,
    pub p90: Density,
}

impl ClipParams {
    pub fn from_percentiles(p10: Density, p90: Density) -> Self {
        let mid = std::array::from_fn(|c| 0.5 * (p90[c] + p10[c]));
        let half_span = std::array::from_fn(|c| (0.5 * (p90[c] - p10[c])).max(MIN_HALF_SPAN));
        Self {
            mid,
            half_span,
            p10,
            p90,
        }
    }

    /// Rebuilds clip parameters from stored `(m, l)` pairs.
    pub fn from_mid_half_span(mid: Density, half_span: Density) -> Self {
        Self {
            mid,
            half_span,
            p10: std::array::from_fn(|c| mid[c] - half_span[c]),
            p90: std::array::from_fn(|c| mid[c] + half_span[c]),
        }
    }

    pub fn clip_value(&self, channel: usize, d: f64) -> f64 {
        let (m, l) = (self.mid[channel], self.half_span[channel]);
        let y = ((d - m) / l).tanh() * l + m;
        // tanh rounds to exactly +-1 past |x| ~ 19; keep the open bound
        let (lo, hi) = (m - l, m + l);
        if y >= hi {
            hi.next_down().max(m)
        } else if y <= lo {
            lo.next_up().min(m)
        } else {
            y
        }
    }

    pub fn clip_row(&self, row: &Density) -> Density {
        std::array::from_fn(|c| self.clip_value(c, row[c]))
    }
}

pub fn soft_clip(embedding: &DensityEmbedding, clip: &ClipParams) -> DensityEmbedding {
    DensityEmbedding {
        values: embedding.values.iter().map(|r| clip.clip_row(r)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, Uniform};

    use super::*;

    fn uniform_state(seed: u64, n: usize) -> ReservoirState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let rows: Vec<Density> = (0..n).map(|_| [u.sample(&mut rng); 4]).collect();
        let mut state = ReservoirState::new(seed);
        state.update_rows(&rows).unwrap();
        state
    }

    #[test]
    fn small_stream_kept_whole() {
        let mut r = Reservoir::new(1000, 1);
        for i in 0..10 {
            r.push(i as f64);
        }
        assert_eq!(r.samples(), &(0..10).map(|i| i as f64).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn capacity_fixed_for_long_streams() {
        for seed in 0..20 {
            let state = uniform_state(seed, 100_000);
            for c in 0..DENSITY_CHANNELS {
                assert_eq!(state.channel(c).samples().len(), 1000);
                assert_eq!(state.channel(c).seen(), 100_000);
            }
        }
    }

    #[test]
    fn constant_stream() {
        let mut r = Reservoir::new(1000, 3);
        for _ in 0..5000 {
            r.push(0.25);
        }
        assert!(r.samples().iter().all(|&v| v == 0.25));
        assert_eq!(r.samples().len(), 1000);
    }

    #[test]
    fn inclusion_probability_uniform() {
        // each of 10 positions in a 100-long stream with capacity 10 is kept
        // with probability 0.1; over 4000 seeds, 400 +- 4 sigma (76)
        let mut hits = [0usize; 100];
        for seed in 0..4000 {
            let mut r = Reservoir::new(10, seed);
            for i in 0..100 {
                r.push(i as f64);
            }
            for &v in r.samples() {
                hits[v as usize] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            assert!((324..=476).contains(&h), "position {i} kept {h} times");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = uniform_state(7, 20_000);
        let b = uniform_state(7, 20_000);
        for c in 0..DENSITY_CHANNELS {
            assert_eq!(a.channel(c).samples(), b.channel(c).samples());
        }
    }

    #[test]
    fn nonfinite_rejected() {
        let mut s = ReservoirState::new(0);
        let err = s.update_rows(&[[0.1; 4], [0.2, f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("non-finite density"));
        assert_eq!(s.seen_count(), [0; 4]);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 90.0).unwrap(), 899.0);
        assert_eq!(nearest_rank(&v, 100.0).unwrap(), 999.0);
        assert_eq!(nearest_rank(&v, 0.0).unwrap(), 0.0);
        assert_eq!(nearest_rank(&v, 10.0).unwrap(), 99.0);
        for p in [0.0, 37.0, 100.0] {
            assert_eq!(nearest_rank(&[5.0], p).unwrap(), 5.0);
        }
        assert_eq!(
            nearest_rank(&[], 50.0).unwrap_err().to_string(),
            "no density statistics"
        );
        assert!(ReservoirState::new(0).fit_clip().is_err());
    }

    #[test]
    fn clip_from_percentiles() {
        let c = ClipParams::from_percentiles([0.2; 4], [0.8; 4]);
        assert!((c.mid[0] - 0.5).abs() < 1e-15);
        assert!((c.half_span[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constant_density_clip() {
        let mut s = ReservoirState::new(0);
        s.update_rows(&vec![[0.03; 4]; 50]).unwrap();
        let c = s.fit_clip().unwrap();
        assert_eq!(c.mid, [0.03; 4]);
        assert_eq!(c.half_span, [MIN_HALF_SPAN; 4]);
        assert!(c.clip_value(0, 5.0).is_finite());
    }

    #[test]
    fn uniform_clip_fit() {
        let c = uniform_state(11, 100_000).fit_clip().unwrap();
        for ch in 0..DENSITY_CHANNELS {
            assert!((c.mid[ch] - 0.5).abs() < 0.03);
            assert!((c.half_span[ch] - 0.4).abs() < 0.03);
        }
    }

    #[test]
    fn clip_examples() {
        let c = ClipParams::from_percentiles([0.2; 4], [0.8; 4]);
        assert_eq!(c.clip_value(0, c.mid[0]), c.mid[0]);
        let at_p90 = c.clip_value(1, c.mid[1] + c.half_span[1]);
        let expected = c.mid[1] + 0.761_594_155_955_764_9 * c.half_span[1];
        assert!((at_p90 - expected).abs() < 1e-15);
        let big = c.clip_value(2, 1e6);
        assert!(big < c.mid[2] + c.half_span[2]);
        let small = c.clip_value(2, -1e6);
        assert!(small > c.mid[2] - c.half_span[2]);
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn clip_bounded_and_monotone(
                m in -1.0f64..1.0,
                l in 1e-3f64..1.0,
                a in -10.0f64..10.0,
                b in -10.0f64..10.0,
            ) {
                let c = ClipParams::from_mid_half_span([m; 4], [l; 4]);
                let (ya, yb) = (c.clip_value(0, a), c.clip_value(0, b));
                prop_assert!(ya > m - l && ya < m + l);
                if a < b { prop_assert!(ya <= yb); }
                // identity-like slope at the center
                let h = 1e-6;
                let slope = (c.clip_value(0, m + h) - c.clip_value(0, m - h)) / (2.0 * h);
                prop_assert!((slope - 1.0).abs() < 1e-6);
            }
        }
    }
}
