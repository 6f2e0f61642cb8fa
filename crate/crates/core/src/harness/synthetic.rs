//! Generator for the multi-scale parity task.
//!
//! Three variates are sampled by independent gamma renewal processes with
//! very different mean intervals:
//!
//! * variate 0 is dense and noisy, with a linear trend whose sign is the
//!   trend bit;
//! * variate 1 is sparse; when the spike bit is set one of its observations
//!   carries a large positive offset;
//! * variate 2 is medium-rate noise.
//!
//! The label combines the two bits (`xor` or `and`), so it depends on both
//! the dense and the sparse variate. The trend is only visible after
//! averaging many dense points while the spike is a single sparse point.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{build_grid, DataDir, DatasetMeta, EventSeries, Instance, Label, TaskKind};
use crate::error::{Error, Result};

/// How the trend and spike bits combine into the label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Neither bit alone carries information about the label.
    Xor,
    /// Positive only when both bits are set.
    #[default]
    And,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub horizon: f64,
    pub dense_interval: f64,
    pub sparse_interval: f64,
    pub noise_interval: f64,
    /// Gamma shape of the inter-arrival times; below 1 makes sampling bursty.
    pub interval_shape: f64,
    pub trend_amplitude: f64,
    pub dense_noise: f64,
    pub sparse_noise: f64,
    pub spike_height: f64,
    pub trend_probability: f64,
    pub spike_probability: f64,
    pub rule: LabelRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 500,
            test: 500,
            horizon: 48.0,
            dense_interval: 1.0,
            sparse_interval: 20.0,
            noise_interval: 4.0,
            interval_shape: 0.8,
            trend_amplitude: 1.0,
            dense_noise: 1.0,
            sparse_noise: 0.5,
            spike_height: 3.0,
            trend_probability: 0.5,
            spike_probability: 0.5,
            rule: LabelRule::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Expected share of positive labels.
    pub fn positive_fraction(&self) -> f64 {
        let (t, s) = (self.trend_probability, self.spike_probability);
        match self.rule {
            LabelRule::Xor => t * (1.0 - s) + (1.0 - t) * s,
            LabelRule::And => t * s,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.horizon,
            self.dense_interval,
            self.sparse_interval,
            self.noise_interval,
            self.interval_shape,
        ];
        if positive.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::Config("horizon, intervals and shape must be positive".into()));
        }
        if [self.dense_noise, self.sparse_noise].iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if ![self.trend_probability, self.spike_probability].iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn meta() -> DatasetMeta {
        DatasetMeta {
            num_variates: 3,
            num_classes: 2,
            task: TaskKind::Sequence,
        }
    }

    /// Draws all three splits. Equal seeds give identical datasets.
    pub fn generate(&self, seed: u64) -> Result<DataDir> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = |name: &str, n: usize| -> Result<Vec<Instance>> {
            (0..n).map(|i| self.instance(&mut rng, format!("{name}-{i}"))).collect()
        };
        let train = split("train", self.train)?;
        let val = split("val", self.val)?;
        let test = split("test", self.test)?;
        Ok(DataDir {
            root: Default::default(),
            meta: Self::meta(),
            train,
            val,
            test,
        })
    }

    fn arrivals(&self, rng: &mut ChaCha8Rng, mean: f64) -> Result<Vec<f64>> {
        let gaps = Gamma::new(self.interval_shape, mean / self.interval_shape)
            .map_err(|e| Error::Config(format!("interval distribution: {e}")))?;
        let mut times = Vec::new();
        let mut t = 0.0;
        loop {
            t += gaps.sample(rng).max(1e-3);
            if t >= self.horizon {
                break;
            }
            times.push(t);
        }
        Ok(times)
    }

    fn instance(&self, rng: &mut ChaCha8Rng, id: String) -> Result<Instance> {
        let trend = rng.random_bool(self.trend_probability);
        let spike = rng.random_bool(self.spike_probability);
        let dense_noise = Normal::new(0.0, self.dense_noise).map_err(|e| Error::Config(e.to_string()))?;
        let sparse_noise = Normal::new(0.0, self.sparse_noise).map_err(|e| Error::Config(e.to_string()))?;
        let slope = if trend { 1.0 } else { -1.0 } * self.trend_amplitude;

        let mut series = EventSeries::new(3);
        for t in self.arrivals(rng, self.dense_interval)? {
            let x = slope * (2.0 * t / self.horizon - 1.0) + dense_noise.sample(rng);
            series.variates[0].push((t, x));
        }
        let mut sparse = self.arrivals(rng, self.sparse_interval)?;
        if sparse.is_empty() {
            sparse.push(rng.random_range(0.0..self.horizon));
        }
        let spiked = *sparse.choose(rng).expect("non-empty");
        for t in sparse {
            let mut x = sparse_noise.sample(rng);
            if spike && t == spiked {
                x += self.spike_height;
            }
            series.variates[1].push((t, x));
        }
        for t in self.arrivals(rng, self.noise_interval)? {
            series.variates[2].push((t, rng.sample::<f64, _>(rand_distr::StandardNormal)));
        }
        let positive = match self.rule {
            LabelRule::Xor => trend != spike,
            LabelRule::And => trend && spike,
        };
        let label = Label::Class(usize::from(positive));
        Ok(Instance {
            id,
            grid: build_grid(&series)?,
            label,
        })
    }
}
