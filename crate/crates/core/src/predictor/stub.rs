use serde::{Deserialize, Serialize};

use super::{PatchSpec, PredictError, PredictorBackend, Result};
use crate::volgrid::{Grid, MultimodalVolume};

/// Output that does not depend on the input.
#[derive(Clone, Debug)]
pub struct ConstantBackend {
    identity: String,
    spec: PatchSpec,
    value: f32,
    max_concurrency: usize,
}

impl ConstantBackend {
    pub fn new(identity: impl Into<String>, spec: PatchSpec, value: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(PredictError::ConfigInvalid(format!(
                "constant probability {value} is outside [0, 1]"
            )));
        }
        Ok(Self {
            identity: identity.into(),
            spec,
            value,
            max_concurrency: usize::MAX,
        })
    }

    pub fn with_max_concurrency(mut self, limit: Option<usize>) -> Self {
        self.max_concurrency = limit.unwrap_or(usize::MAX);
        self
    }
}

impl PredictorBackend for ConstantBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        Ok(Grid::filled(patch.shape(), self.spec.out_channels, self.value))
    }
}

/// One output channel of [`SphereStubBackend`]: probability rises linearly
/// from 0 at `lo` to 1 at `hi` of input channel `source`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampRule {
    pub source: usize,
    pub lo: f32,
    pub hi: f32,
}

impl RampRule {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Analytic stand-in for a trained network.
///
/// Each output channel is a clamped linear ramp of one (normalized) input
/// modality, so a bright synthetic sphere comes out as probability 1 inside
/// with a smooth fall-off across its intensity shell. The response is
/// voxel-wise, hence equivariant to flips and translations: any window
/// layout or flip set reproduces the same map, which makes sliding-window
/// and TTA results exactly predictable.
#[derive(Clone, Debug)]
pub struct SphereStubBackend {
    identity: String,
    spec: PatchSpec,
    rules: [RampRule; 3],
    max_concurrency: usize,
}

impl SphereStubBackend {
    /// TC from T1, WT from T2-FLAIR, ET from T1Gd; ramp over [0.25, 0.75]
    /// normalized units.
    pub fn default_rules() -> [RampRule; 3] {
        let r = |source| RampRule {
            source,
            lo: 0.25,
            hi: 0.75,
        };
        [r(0), r(3), r(1)]
    }

    pub fn new(identity: impl Into<String>, spec: PatchSpec, rules: [RampRule; 3]) -> Result<Self> {
        for (c, r) in rules.iter().enumerate() {
            if r.source >= MultimodalVolume::CHANNELS || !(r.lo < r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(PredictError::ConfigInvalid(format!(
                    "ramp rule for output channel {c} is invalid: {r:?}"
                )));
            }
        }
        Ok(Self {
            identity: identity.into(),
            spec,
            rules,
            max_concurrency: usize::MAX,
        })
    }

    pub fn with_max_concurrency(mut self, limit: Option<usize>) -> Self {
        self.max_concurrency = limit.unwrap_or(usize::MAX);
        self
    }

    pub fn rules(&self) -> &[RampRule; 3] {
        &self.rules
    }
}

impl PredictorBackend for SphereStubBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        let n = patch.shape().voxel_count();
        let mut out = Vec::with_capacity(3 * n);
        for rule in &self.rules {
            out.extend(patch.channel(rule.source).iter().map(|&v| rule.apply(v)));
        }
        Ok(Grid::new(patch.shape(), 3, out).expect("three channels of patch size"))
    }
}

#[cfg(test)]
mod tests {
    use super::super::predict_patch;
    use super::*;
    use crate::volgrid::{AxisSet, GridShape};

    fn spec(n: usize) -> PatchSpec {
        PatchSpec::new(GridShape::cube(n).unwrap())
    }

    /// Patch with a sphere of radius `r` at `c` whose intensity falls
    /// linearly from 1 at the surface to 0 two voxels further out.
    fn sphere_patch(n: usize, centre: [f32; 3], r: f32, channel: usize) -> Grid<f32> {
        let shape = GridShape::cube(n).unwrap();
        let mut g = Grid::filled(shape, 4, 0.0f32);
        let ch = g.channel_mut(channel);
        for (i, v) in ch.iter_mut().enumerate() {
            let p = shape.coords(i);
            let d = (0..3).map(|a| (p[a] as f32 - centre[a]).powi(2)).sum::<f32>().sqrt();
            *v = (1.0 - (d - r) / 2.0).clamp(0.0, 1.0);
        }
        g
    }

    #[test]
    fn constant_everywhere() {
        let b = ConstantBackend::new("c", spec(6), 0.7).unwrap();
        let out = predict_patch(&b, &Grid::filled(GridShape::cube(6).unwrap(), 4, 3.0)).unwrap();
        assert!(out.grid().data().iter().all(|&v| v == 0.7));
        assert!(ConstantBackend::new("c", spec(6), -0.1).is_err());
    }

    #[test]
    fn sphere_stub_matches_closed_form() {
        let rules = [
            RampRule { source: 3, lo: 0.0, hi: 0.5 },
            RampRule { source: 3, lo: 0.0, hi: 0.5 },
            RampRule { source: 1, lo: 0.0, hi: 0.5 },
        ];
        let b = SphereStubBackend::new("s", spec(16), rules).unwrap();
        let patch = sphere_patch(16, [7.5, 7.5, 7.5], 4.0, 3);
        let out = predict_patch(&b, &patch).unwrap();
        let shape = patch.shape();
        for i in 0..shape.voxel_count() {
            let p = shape.coords(i);
            let d = (0..3).map(|a| (p[a] as f32 - 7.5).powi(2)).sum::<f32>().sqrt();
            let intensity = (1.0 - (d - 4.0) / 2.0).clamp(0.0, 1.0);
            let expected = (intensity / 0.5).clamp(0.0, 1.0);
            for c in 0..2 {
                assert_eq!(out.channel(c)[i], expected);
            }
            if d <= 4.0 {
                assert_eq!(out.channel(0)[i], 1.0);
            }
            if d >= 6.0 {
                assert_eq!(out.channel(0)[i], 0.0);
            }
            // ET reads T1Gd, which holds no sphere
            assert_eq!(out.channel(2)[i], 0.0);
        }
        let shell = out.channel(0).iter().filter(|&&v| v > 0.0 && v < 1.0).count();
        assert!(shell > 0);
    }

    #[test]
    fn sphere_stub_is_flip_equivariant_and_deterministic() {
        let b = SphereStubBackend::new("s", spec(12), SphereStubBackend::default_rules()).unwrap();
        let patch = sphere_patch(12, [5.5, 5.5, 5.5], 3.0, 0);
        let base = predict_patch(&b, &patch).unwrap();
        assert_eq!(predict_patch(&b, &patch).unwrap(), base);
        for s in AxisSet::power_set() {
            let flipped = predict_patch(&b, &patch.flipped(s)).unwrap();
            assert_eq!(flipped.grid(), &base.grid().flipped(s));
        }
    }

    #[test]
    fn rejects_bad_rules() {
        let mut rules = SphereStubBackend::default_rules();
        rules[1].source = 4;
        assert!(SphereStubBackend::new("s", spec(4), rules).is_err());
        let mut rules = SphereStubBackend::default_rules();
        rules[0].hi = rules[0].lo;
        assert!(SphereStubBackend::new("s", spec(4), rules).is_err());
    }
}
