//! Random probe directions `v` with `E[v v^T] = I`.

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::vector::MetaVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Entries i.i.d. uniform on {-1, +1}.
    #[default]
    Rademacher,
    /// Entries i.i.d. standard normal.
    Gaussian,
    /// `sqrt(N) e_i` with `i` uniform over coordinates.
    Coordinate,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Rademacher => "rademacher",
            Distribution::Gaussian => "gaussian",
            Distribution::Coordinate => "coordinate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBatch {
    directions: Vec<MetaVector>,
    distribution: Distribution,
    base_seed: u64,
}

impl DirectionBatch {
    pub fn directions(&self) -> &[MetaVector] {
        &self.directions
    }

    pub fn distribution(&self) -> Distribution {
        self.distribution
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.directions.first().map_or(0, |d| d.len())
    }

    /// All N scaled coordinate directions `sqrt(N) e_0 .. sqrt(N) e_{N-1}`,
    /// for which `(1/N) sum v v^T = I` holds exactly.
    pub fn coordinate_basis(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("direction dimension must be >= 1"));
        }
        let scale = (n as f64).sqrt();
        let directions = (0..n)
            .map(|i| {
                let mut v = MetaVector::zeros(n);
                v[i] = scale;
                v
            })
            .collect();
        Ok(Self {
            directions,
            distribution: Distribution::Coordinate,
            base_seed: 0,
        })
    }

    /// Builds a batch from explicit directions (tests and fixtures).
    pub fn from_directions(
        directions: Vec<MetaVector>,
        distribution: Distribution,
    ) -> Result<Self> {
        let n = directions.first().map(|d| d.len()).unwrap_or(0);
        if n == 0 {
            return Err(Error::invalid("direction batch must be non-empty"));
        }
        if directions.iter().any(|d| d.len() != n) {
            return Err(Error::invalid("directions have inconsistent lengths"));
        }
        Ok(Self {
            directions,
            distribution,
            base_seed: 0,
        })
    }

    /// Same directions, negated.
    pub fn negated(&self) -> Self {
        Self {
            directions: self.directions.iter().map(|d| d.scaled(-1.0)).collect(),
            distribution: self.distribution,
            base_seed: self.base_seed,
        }
    }
}

/// Direction `j` of the batch seeded by `seed`; a pure function of `(seed, j)`.
pub fn sample_direction(dist: Distribution, n: usize, seed: u64, j: u64) -> MetaVector {
    let mut rng = Rng::substream(seed, j);
    match dist {
        Distribution::Rademacher => (0..n).map(|_| rng.sign()).collect::<Vec<_>>().into(),
        Distribution::Gaussian => rng.normal_vec(n).into(),
        Distribution::Coordinate => {
            let mut v = MetaVector::zeros(n);
            v[rng.index(n)] = (n as f64).sqrt();
            v
        }
    }
}

pub fn sample_directions(
    dist: Distribution,
    n: usize,
    b: usize,
    seed: u64,
) -> Result<DirectionBatch> {
    if n == 0 {
        return Err(Error::invalid("direction dimension n must be >= 1"));
    }
    if b == 0 {
        return Err(Error::invalid("number of directions b must be >= 1"));
    }
    let directions = (0..b as u64)
        .map(|j| sample_direction(dist, n, seed, j))
        .collect();
    Ok(DirectionBatch {
        directions,
        distribution: dist,
        base_seed: seed,
    })
}
