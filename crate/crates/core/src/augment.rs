//! Shape-preserving point-cloud augmentations and the weak / strong /
//! extra-hard view policies.

use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcdata::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rotate,
    Scale,
    Translate,
    Jitter,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Rotate,
        TransformKind::Scale,
        TransformKind::Translate,
        TransformKind::Jitter,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!(
                "unknown axis `{s}` (expected x, y or z)"
            ))),
        }
    }
}

/// A concrete transform with its parameters already drawn. Jitter noise is
/// drawn per point when the transform is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Rotate { angle: f64, axis: Axis },
    Scale { factor: f64 },
    Translate { offset: [f64; 3] },
    Jitter { sigma: f64, clip: f64 },
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Rotate { .. } => TransformKind::Rotate,
            Transform::Scale { .. } => TransformKind::Scale,
            Transform::Translate { .. } => TransformKind::Translate,
            Transform::Jitter { .. } => TransformKind::Jitter,
        }
    }

    pub fn rotate(angle: f64, axis: Axis) -> Result<Self> {
        if !angle.is_finite() {
            return Err(Error::InvalidArgument(
                "rotation angle must be finite".into(),
            ));
        }
        Ok(Transform::Rotate { angle, axis })
    }

    pub fn scale(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be > 0, got {factor}"
            )));
        }
        Ok(Transform::Scale { factor })
    }

    pub fn jitter(sigma: f64, clip: f64) -> Result<Self> {
        if !(sigma >= 0.0 && clip >= sigma && clip.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "jitter needs sigma >= 0 and clip >= sigma, got sigma={sigma} clip={clip}"
            )));
        }
        Ok(Transform::Jitter { sigma, clip })
    }
}

/// Parameter ranges for drawing transforms and the view policies built on
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub rot_axis: Axis,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate_max: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Distinct kinds composed by the strong view.
    pub strong_kinds: usize,
    /// Transforms composed (with repetition) by the extra-hard view.
    pub strength: usize,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            rot_axis: Axis::Z,
            scale_min: 2.0 / 3.0,
            scale_max: 1.5,
            translate_max: 0.2,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            strong_kinds: 2,
            strength: 4,
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return bad(format!(
                "scale range must satisfy 0 < min <= max, got [{}, {}]",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.translate_max >= 0.0 && self.translate_max.is_finite()) {
            return bad(format!(
                "translate_max must be >= 0, got {}",
                self.translate_max
            ));
        }
        if !(self.jitter_sigma >= 0.0
            && self.jitter_clip >= self.jitter_sigma
            && self.jitter_clip.is_finite())
        {
            return bad(format!(
                "jitter clip ({}) must be >= sigma ({}) >= 0",
                self.jitter_clip, self.jitter_sigma
            ));
        }
        if !(1..=TransformKind::ALL.len()).contains(&self.strong_kinds) {
            return bad(format!(
                "strong_kinds must lie in 1..=4, got {}",
                self.strong_kinds
            ));
        }
        if self.strength < 2 {
            return bad(format!("strength must be >= 2, got {}", self.strength));
        }
        Ok(())
    }

    /// Draws the parameters of one transform of `kind`.
    pub fn draw<R: Rng>(&self, kind: TransformKind, rng: &mut R) -> Transform {
        match kind {
            TransformKind::Rotate => Transform::Rotate {
                angle: rng.random_range(0.0..TAU),
                axis: self.rot_axis,
            },
            TransformKind::Scale => Transform::Scale {
                factor: if self.scale_min < self.scale_max {
                    rng.random_range(self.scale_min..=self.scale_max)
                } else {
                    self.scale_min
                },
            },
            TransformKind::Translate => {
                let t = self.translate_max;
                let mut d = || {
                    if t > 0.0 {
                        rng.random_range(-t..=t)
                    } else {
                        0.0
                    }
                };
                Transform::Translate {
                    offset: [d(), d(), d()],
                }
            }
            TransformKind::Jitter => Transform::Jitter {
                sigma: self.jitter_sigma,
                clip: self.jitter_clip,
            },
        }
    }
}

/// An augmented cloud together with the transforms that produced it, in
/// application order.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub cloud: PointCloud,
    pub transforms: Vec<Transform>,
}

pub fn apply<R: Rng>(t: &Transform, cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let pts = cloud.points();
    let out: Vec<[f64; 3]> = match *t {
        Transform::Rotate { angle, axis } => {
            let (s, c) = angle.sin_cos();
            let a = axis.index();
            let (i, j) = ((a + 1) % 3, (a + 2) % 3);
            pts.iter()
                .map(|p| {
                    let mut q = *p;
                    q[i] = c * p[i] - s * p[j];
                    q[j] = s * p[i] + c * p[j];
                    q
                })
                .collect()
        }
        Transform::Scale { factor } => pts.iter().map(|p| p.map(|v| v * factor)).collect(),
        Transform::Translate { offset } => pts
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect(),
        Transform::Jitter { sigma, clip } => {
            if sigma == 0.0 {
                pts.to_vec()
            } else {
                let normal = Normal::new(0.0, sigma).expect("sigma validated");
                pts.iter()
                    .map(|p| p.map(|v| v + normal.sample(rng).clamp(-clip, clip)))
                    .collect()
            }
        }
    };
    PointCloud::from_points_unchecked(out)
}

fn compose<R: Rng>(cloud: &PointCloud, transforms: Vec<Transform>, rng: &mut R) -> View {
    let mut cur = cloud.clone();
    for t in &transforms {
        cur = apply(t, &cur, rng);
    }
    View {
        cloud: cur,
        transforms,
    }
}

/// Rotation about the up-axis followed by a random scale.
pub fn weak_view<R: Rng>(cloud: &PointCloud, rng: &mut R, policy: &AugPolicy) -> View {
    let ts = vec![
        policy.draw(TransformKind::Rotate, rng),
        policy.draw(TransformKind::Scale, rng),
    ];
    compose(cloud, ts, rng)
}

/// `policy.strong_kinds` distinct kinds in random order.
pub fn strong_view<R: Rng>(cloud: &PointCloud, rng: &mut R, policy: &AugPolicy) -> View {
    let picks = index::sample(rng, TransformKind::ALL.len(), policy.strong_kinds);
    let kinds: Vec<TransformKind> = picks.iter().map(|i| TransformKind::ALL[i]).collect();
    let ts = kinds.into_iter().map(|k| policy.draw(k, rng)).collect();
    compose(cloud, ts, rng)
}

/// `strength` transforms, kinds drawn with replacement.
pub fn extra_hard_view<R: Rng>(
    cloud: &PointCloud,
    rng: &mut R,
    policy: &AugPolicy,
    strength: usize,
) -> Result<View> {
    if strength < 2 {
        return Err(Error::InvalidArgument(format!(
            "strength must be >= 2, got {strength}"
        )));
    }
    let ts = (0..strength)
        .map(|_| {
            let k = TransformKind::ALL[rng.random_range(0..TransformKind::ALL.len())];
            policy.draw(k, rng)
        })
        .collect();
    Ok(compose(cloud, ts, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcdata::{generate_shape, ShapeKind};
    use crate::rng::{self, Tag};
    use proptest::prelude::*;

    fn cloud(seed: u64) -> PointCloud {
        let mut r = rng::stream(seed, Tag::Shape, &[]);
        generate_shape(ShapeKind::Pyramid, 32, &mut r).unwrap()
    }

    fn r() -> rng::Stream {
        rng::stream(1, Tag::UnlabeledStrong, &[])
    }

    fn max_pair_dist_change(a: &PointCloud, b: &PointCloud, factor: f64) -> f64 {
        let d = |p: &[f64; 3], q: &[f64; 3]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let (pa, pb) = (a.points(), b.points());
        let mut worst = 0.0f64;
        for i in 0..pa.len() {
            for j in i + 1..pa.len() {
                worst = worst.max((d(&pb[i], &pb[j]) - factor * d(&pa[i], &pa[j])).abs());
            }
        }
        worst
    }

    #[test]
    fn full_turn_is_identity() {
        let c = cloud(1);
        let out = apply(&Transform::rotate(TAU, Axis::Z).unwrap(), &c, &mut r());
        for (p, q) in c.points().iter().zip(out.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn unit_scale_and_zero_jitter_are_identity() {
        let c = cloud(2);
        assert_eq!(apply(&Transform::scale(1.0).unwrap(), &c, &mut r()), c);
        assert_eq!(
            apply(&Transform::jitter(0.0, 0.05).unwrap(), &c, &mut r()),
            c
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Transform::scale(0.0).is_err());
        assert!(Transform::jitter(0.1, 0.05).is_err());
        let p = AugPolicy {
            strength: 1,
            ..AugPolicy::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn jitter_is_clipped() {
        let c = cloud(3);
        let out = apply(&Transform::jitter(0.05, 0.05).unwrap(), &c, &mut r());
        for (p, q) in c.points().iter().zip(out.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn weak_view_with_degenerate_policy_is_rotation_only() {
        let policy = AugPolicy {
            scale_min: 1.0,
            scale_max: 1.0,
            ..AugPolicy::default()
        };
        let c = cloud(4);
        let v = weak_view(&c, &mut r(), &policy);
        assert_eq!(v.transforms.len(), 2);
        assert_eq!(v.transforms[0].kind(), TransformKind::Rotate);
        assert_eq!(v.transforms[1], Transform::Scale { factor: 1.0 });
        let Transform::Rotate { angle, .. } = v.transforms[0] else {
            unreachable!()
        };
        let undo = apply(
            &Transform::rotate(-angle, Axis::Z).unwrap(),
            &v.cloud,
            &mut r(),
        );
        for (p, q) in c.points().iter().zip(undo.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn strong_view_uses_distinct_kinds_and_is_deterministic() {
        let c = cloud(5);
        let p = AugPolicy::default();
        for seed in 0..20 {
            let a = strong_view(&c, &mut rng::stream(seed, Tag::UnlabeledStrong, &[]), &p);
            let b = strong_view(&c, &mut rng::stream(seed, Tag::UnlabeledStrong, &[]), &p);
            assert_eq!(a, b);
            assert_eq!(a.transforms.len(), 2);
            assert_ne!(a.transforms[0].kind(), a.transforms[1].kind());
        }
    }

    #[test]
    fn extra_hard_applies_exactly_strength_transforms() {
        let c = cloud(6);
        let p = AugPolicy::default();
        for s in [2, 4, 7] {
            let v = extra_hard_view(&c, &mut r(), &p, s).unwrap();
            assert_eq!(v.transforms.len(), s);
        }
        assert!(extra_hard_view(&c, &mut r(), &p, 1).is_err());
    }

    proptest! {
        #[test]
        fn rotation_is_an_isometry(angle in 0.0..TAU, seed in 0u64..50) {
            let c = cloud(seed);
            for axis in [Axis::X, Axis::Y, Axis::Z] {
                let out = apply(&Transform::rotate(angle, axis).unwrap(), &c, &mut r());
                prop_assert!(max_pair_dist_change(&c, &out, 1.0) <= 1e-5);
            }
        }

        #[test]
        fn scaling_multiplies_distances(factor in 0.5f64..2.0, seed in 0u64..50) {
            let c = cloud(seed);
            let out = apply(&Transform::scale(factor).unwrap(), &c, &mut r());
            prop_assert!(max_pair_dist_change(&c, &out, factor) <= 1e-9);
        }

        #[test]
        fn views_preserve_count_and_finiteness(seed in 0u64..200, strength in 2usize..9) {
            let c = cloud(seed);
            let p = AugPolicy::default();
            let mut rr = rng::stream(seed, Tag::UnlabeledStrong, &[1]);
            for v in [
                weak_view(&c, &mut rr, &p),
                strong_view(&c, &mut rr, &p),
                extra_hard_view(&c, &mut rr, &p, strength).unwrap(),
            ] {
                prop_assert_eq!(v.cloud.len(), c.len());
                prop_assert!(v.cloud.points().iter().flatten().all(|x| x.is_finite()));
            }
        }
    }
}
