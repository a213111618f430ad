//! LiDAR degradations: beam reduction, random point dropout and azimuthal
//! field-of-view clipping, plus the randomized-beam training schedule.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::to_spherical;
use crate::scene_synth::{LidarPoint, PointCloud};

/// Inclination bands, degrees, of the 16-beam emulation.
pub const BEAM16_BANDS: [(f64, f64); 4] = [(-7.1, -5.8), (-4.5, -3.2), (-1.9, -0.6), (0.7, 2.0)];
/// Inclination band, degrees, of the 4-beam emulation.
pub const BEAM4_BANDS: [(f64, f64); 1] = [(-30.0, 10.0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BeamMode {
    Full,
    Beam16,
    Beam4,
}

impl BeamMode {
    pub const ALL: [BeamMode; 3] = [BeamMode::Full, BeamMode::Beam16, BeamMode::Beam4];

    /// Disjoint, sorted inclination bands (degrees); `None` keeps everything.
    pub fn bands(self) -> Option<&'static [(f64, f64)]> {
        match self {
            BeamMode::Full => None,
            BeamMode::Beam16 => Some(&BEAM16_BANDS),
            BeamMode::Beam4 => Some(&BEAM4_BANDS),
        }
    }

    pub fn target_beams(self) -> Option<usize> {
        match self {
            BeamMode::Full => None,
            BeamMode::Beam16 => Some(16),
            BeamMode::Beam4 => Some(4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BeamMode::Full => "FULL",
            BeamMode::Beam16 => "BEAM16",
            BeamMode::Beam4 => "BEAM4",
        }
    }
}

impl std::str::FromStr for BeamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(BeamMode::Full),
            "BEAM16" => Ok(BeamMode::Beam16),
            "BEAM4" => Ok(BeamMode::Beam4),
            _ => Err(Error::Config(format!("unknown beam mode {s:?}"))),
        }
    }
}

/// How a beam mode selects points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamSelection {
    /// Keep points whose inclination falls in the mode's bands.
    #[default]
    Angular,
    /// Keep every `(B / target)`-th beam index.
    ByBeamIndex,
}

pub fn inclination_deg(p: &LidarPoint) -> Option<f64> {
    to_spherical(p.position()).ok().map(|s| s.inclination.to_degrees())
}

pub fn in_bands(incl_deg: f64, bands: &[(f64, f64)]) -> bool {
    bands.iter().any(|&(lo, hi)| (lo..=hi).contains(&incl_deg))
}

pub fn filter_beams(cloud: &PointCloud, mode: BeamMode, selection: BeamSelection) -> PointCloud {
    let (Some(bands), Some(target)) = (mode.bands(), mode.target_beams()) else {
        return cloud.clone();
    };
    match selection {
        BeamSelection::Angular => cloud.filtered(|p| inclination_deg(p).is_some_and(|i| in_bands(i, bands))),
        BeamSelection::ByBeamIndex => {
            let step = (cloud.beams / target).max(1);
            cloud.filtered(|p| (p.beam as usize).is_multiple_of(step))
        }
    }
}

/// Uniformly keeps `⌊n·keep_ratio⌋` points without replacement, in their
/// original order.
pub fn drop_points(cloud: &PointCloud, keep_ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let n = cloud.len();
    let k = ((n as f64) * keep_ratio).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, n, k).into_vec();
    keep.sort_unstable();
    Ok(PointCloud::from_points(
        keep.into_iter().map(|i| cloud.points[i]).collect(),
        cloud.beams,
    ))
}

pub fn azimuth(p: &LidarPoint) -> f64 {
    let a = (p.y as f64).atan2(p.x as f64);
    if a == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

/// Keeps points with azimuth in `[-half_angle, half_angle]`.
pub fn clip_fov(cloud: &PointCloud, half_angle: f64) -> Result<PointCloud> {
    if !(half_angle > 0.0 && half_angle <= std::f64::consts::PI) {
        return Err(Error::Config(format!("FOV half-angle {half_angle} outside (0, π]")));
    }
    Ok(cloud.filtered(|p| azimuth(p).abs() <= half_angle))
}

/// Beam mode of the randomized-beam augmentation at optimizer step `step`.
pub fn augmentation_mode(step: u64, seed: u64) -> BeamMode {
    if !step.is_multiple_of(10) {
        return BeamMode::Full;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    BeamMode::ALL[rng.random_range(0..3)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum Corruption {
    Beams(BeamMode),
    Ratio(f64),
    Fov(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub corruption: Corruption,
    pub seed: u64,
    pub selection: BeamSelection,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.corruption {
            Corruption::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                Err(Error::Config(format!("keep ratio {r} outside (0, 1]")))
            }
            Corruption::Fov(a) if !(a > 0.0 && a <= std::f64::consts::PI) => {
                Err(Error::Config(format!("FOV half-angle {a} outside (0, π]")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self.corruption {
            Corruption::Beams(m) => Ok(filter_beams(cloud, m, self.selection)),
            Corruption::Ratio(r) => drop_points(cloud, r, self.seed),
            Corruption::Fov(a) => clip_fov(cloud, a),
        }
    }

    /// Short label such as `ratio=0.25`.
    pub fn label(&self) -> String {
        match self.corruption {
            Corruption::Beams(m) => format!("beams={}", m.name()),
            Corruption::Ratio(r) => format!("ratio={r}"),
            Corruption::Fov(a) => format!("fov={a:.4}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::scene_synth::{generate_scene, SynthConfig};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn point_at_inclination(deg: f64) -> LidarPoint {
        let r = deg.to_radians();
        LidarPoint::at(Point3::new(10.0 * r.cos(), 0.0, 10.0 * r.sin()))
    }

    fn sweep() -> PointCloud {
        let cfg = SynthConfig {
            rays_per_beam: 120,
            ..SynthConfig::default()
        };
        generate_scene(&cfg, 0).unwrap().cloud
    }

    #[test]
    fn beam16_band_membership() {
        let c = PointCloud::from_points(vec![point_at_inclination(-6.0), point_at_inclination(-10.0)], 32);
        let f = filter_beams(&c, BeamMode::Beam16, BeamSelection::Angular);
        assert_eq!(f.len(), 1);
        assert!((inclination_deg(&f.points[0]).unwrap() + 6.0).abs() < 1e-4);
    }

    #[test]
    fn full_mode_is_identity() {
        let c = sweep();
        assert_eq!(filter_beams(&c, BeamMode::Full, BeamSelection::Angular), c);
        assert_eq!(filter_beams(&c, BeamMode::Full, BeamSelection::ByBeamIndex), c);
    }

    #[test]
    fn beam_index_selection_keeps_every_kth_beam() {
        let c = sweep();
        let f = filter_beams(&c, BeamMode::Beam4, BeamSelection::ByBeamIndex);
        let mut ids: Vec<u16> = f.points.iter().map(|p| p.beam).collect();
        ids.sort_unstable();
        ids.dedup();
        assert!(ids.iter().all(|b| b % 8 == 0));
        let f16 = filter_beams(&c, BeamMode::Beam16, BeamSelection::ByBeamIndex);
        assert!(f16.points.iter().all(|p| p.beam % 2 == 0));
        assert_eq!(f16.len(), c.points.iter().filter(|p| p.beam % 2 == 0).count());
    }

    #[test]
    fn drop_points_cardinality_and_containment() {
        let c = PointCloud::from_points(
            (0..1000)
                .map(|i| LidarPoint::at(Point3::new(i as f64, (i * 7 % 13) as f64, 0.0)))
                .collect(),
            32,
        );
        assert_eq!(drop_points(&c, 1.0, 3).unwrap(), c);
        let half = drop_points(&c, 0.5, 3).unwrap();
        assert_eq!(half.len(), 500);
        // order preserved and every survivor present in the input
        let xs: Vec<f32> = half.points.iter().map(|p| p.x).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        for p in &half.points {
            assert!(c.points.contains(p));
        }
        assert_eq!(drop_points(&c, 0.5, 3).unwrap(), half);
        assert_ne!(drop_points(&c, 0.5, 4).unwrap(), half);
        assert!(drop_points(&c, 0.0, 3).is_err());
    }

    #[test]
    fn fov_examples() {
        let c = sweep();
        assert_eq!(clip_fov(&c, PI).unwrap(), c);
        let fwd = PointCloud::from_points(vec![LidarPoint::at(Point3::new(1.0, 0.0, 0.0))], 1);
        for a in [0.1, PI / 3.0, PI] {
            assert_eq!(clip_fov(&fwd, a).unwrap().len(), 1);
        }
        let back = PointCloud::from_points(vec![LidarPoint::at(Point3::new(-1.0, 0.01, 0.0))], 1);
        assert!(clip_fov(&back, 5.0 * PI / 6.0).unwrap().is_empty());
    }

    #[test]
    fn augmentation_schedule() {
        assert_eq!(augmentation_mode(3, 9), BeamMode::Full);
        assert_eq!(augmentation_mode(10, 9), augmentation_mode(10, 9));
        let mut counts = [0usize; 3];
        for k in 0..3000u64 {
            let m = augmentation_mode(10 * (k + 1), 1234);
            counts[BeamMode::ALL.iter().position(|&x| x == m).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((0.28..=0.39).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn filters_are_idempotent_and_commute() {
        let c = sweep();
        let b = filter_beams(&c, BeamMode::Beam16, BeamSelection::Angular);
        assert_eq!(filter_beams(&b, BeamMode::Beam16, BeamSelection::Angular), b);
        let f = clip_fov(&c, PI / 2.0).unwrap();
        assert_eq!(clip_fov(&f, PI / 2.0).unwrap(), f);
        assert_eq!(
            filter_beams(&f, BeamMode::Beam16, BeamSelection::Angular),
            clip_fov(&b, PI / 2.0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn fov_survivors_satisfy_predicate(half in 0.01f64..=PI, xs in proptest::collection::vec((-20f32..20.0, -20f32..20.0), 1..200)) {
            let c = PointCloud::from_points(xs.iter().map(|&(x, y)| LidarPoint { x, y, z: 0.0, intensity: 0.0, beam: 0 }).collect(), 1);
            let f = clip_fov(&c, half).unwrap();
            for p in &f.points {
                prop_assert!(azimuth(p).abs() <= half);
            }
            prop_assert_eq!(f.len(), c.points.iter().filter(|p| azimuth(p).abs() <= half).count());
        }
    }
}
