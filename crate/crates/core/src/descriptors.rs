//! Global descriptors pooled from convolutional feature maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, scale_in_place};

/// A `C x H x W` block of non-negative activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::DimensionMismatch { expected: channels * height * width, found: values.len() });
        }
        let plane = height * width;
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!(
                "activation {} at channel {} is not a finite non-negative value",
                values[pos],
                pos / plane
            )));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Activations of channel `c` over all spatial cells.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[c * plane..(c + 1) * plane]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    /// Spatial mean.
    Spoc,
    /// Spatial max.
    Mac,
    /// Generalized (power) mean.
    Gem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub kind: PoolingKind,
    /// GeM exponent; ignored for other kinds.
    #[serde(default = "default_gem_p")]
    pub p: f64,
}

fn default_gem_p() -> f64 {
    3.0
}

impl PoolingSpec {
    pub fn spoc() -> Self {
        Self { kind: PoolingKind::Spoc, p: default_gem_p() }
    }

    pub fn mac() -> Self {
        Self { kind: PoolingKind::Mac, p: default_gem_p() }
    }

    pub fn gem(p: f64) -> Self {
        Self { kind: PoolingKind::Gem, p }
    }

    fn validate(&self) -> Result<()> {
        if self.kind == PoolingKind::Gem && !(self.p.is_finite() && self.p > 0.0) {
            return Err(Error::Config(format!("GeM exponent must be > 0, got {}", self.p)));
        }
        Ok(())
    }
}

impl std::str::FromStr for PoolingSpec {
    type Err = Error;

    /// Parses `spoc`, `mac`, `gem` or `gem:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let spec = match s.split_once(':') {
            None if s == "spoc" => Self::spoc(),
            None if s == "mac" => Self::mac(),
            None if s == "gem" => Self::gem(default_gem_p()),
            Some(("gem", p)) => Self::gem(p.parse().map_err(|_| Error::Config(format!("bad GeM exponent {p:?}")))?),
            _ => return Err(Error::Config(format!("unknown pooling spec {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn pool_channel(xs: &[f64], spec: &PoolingSpec) -> f64 {
    let n = xs.len() as f64;
    match spec.kind {
        PoolingKind::Spoc => xs.iter().sum::<f64>() / n,
        PoolingKind::Mac => xs.iter().copied().fold(0.0, f64::max),
        PoolingKind::Gem if spec.p == 1.0 => xs.iter().sum::<f64>() / n,
        PoolingKind::Gem => {
            // Factor out the max so large exponents neither underflow nor overflow.
            let max = xs.iter().copied().fold(0.0, f64::max);
            if max == 0.0 {
                return 0.0;
            }
            let mean = xs.iter().map(|x| (x / max).powf(spec.p)).sum::<f64>() / n;
            max * mean.powf(1.0 / spec.p)
        }
    }
}

/// Pools every channel of `map` into one value.
pub fn pool(map: &FeatureMap, spec: &PoolingSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok((0..map.channels).map(|c| pool_channel(map.channel(c), spec)).collect())
}

/// Pools with each spec, L2-normalizes each descriptor, concatenates them in
/// order and normalizes the result.
pub fn combine_descriptors(map: &FeatureMap, specs: &[PoolingSpec]) -> Result<Vec<f64>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one pooling spec is required".into()));
    }
    let mut out = Vec::with_capacity(map.channels * specs.len());
    for spec in specs {
        let mut v = pool(map, spec)?;
        let norm = l2_norm(&v);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("{:?} descriptor has zero norm", spec.kind)));
        }
        scale_in_place(&mut v, 1.0 / norm);
        out.extend(v);
    }
    let norm = l2_norm(&out);
    scale_in_place(&mut out, 1.0 / norm);
    Ok(out)
}
