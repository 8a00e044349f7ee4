use crate::error::{Error, Result};

/// A multivariate series segment with `channels` rows and `len` timesteps.
///
/// Values are stored channel-major: entry `(c, t)` lives at `c * len + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    channels: usize,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn new(channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || values.is_empty() || !values.len().is_multiple_of(channels) {
            return Err(Error::Config(format!(
                "trajectory with {} values cannot have {} channels",
                values.len(),
                channels
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("trajectory entry is not finite: {bad}")));
        }
        Ok(Self { channels, values })
    }

    /// Univariate series.
    pub fn from_series(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            values: vec![0.0; channels * len],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, channel: usize, t: usize) -> f64 {
        self.values[channel * self.len() + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// All channels at timestep `t`.
    pub fn point(&self, t: usize) -> Vec<f64> {
        let len = self.len();
        (0..self.channels).map(|c| self.values[c * len + t]).collect()
    }

    /// Builds a trajectory from per-timestep points (each of width `channels`).
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let channels = points.first().map(Vec::len).ok_or(Error::Empty("trajectory points"))?;
        let len = points.len();
        let mut values = vec![0.0; channels * len];
        for (t, p) in points.iter().enumerate() {
            if p.len() != channels {
                return Err(Error::Config("ragged trajectory points".into()));
            }
            for (c, v) in p.iter().enumerate() {
                values[c * len + t] = *v;
            }
        }
        Self::new(channels, values)
    }

    /// Squared Euclidean distance between timestep `i` of `self` and timestep `j` of `other`.
    pub fn sq_dist(&self, i: usize, other: &Trajectory, j: usize) -> f64 {
        let (la, lb) = (self.len(), other.len());
        (0..self.channels)
            .map(|c| {
                let d = self.values[c * la + i] - other.values[c * lb + j];
                d * d
            })
            .sum()
    }

    pub fn same_shape(&self, other: &Trajectory) -> Result<()> {
        if self.channels != other.channels || self.len() != other.len() {
            return Err(Error::Config(format!(
                "trajectory shape mismatch: {}x{} vs {}x{}",
                self.channels,
                self.len(),
                other.channels,
                other.len()
            )));
        }
        Ok(())
    }

    /// Adds `offset` to every entry.
    pub fn shifted(&self, offset: f64) -> Trajectory {
        Trajectory {
            channels: self.channels,
            values: self.values.iter().map(|v| v + offset).collect(),
        }
    }
}
