//! Weight initializers for the robustness study.
//!
//! Twelve schemes spanning fixed-range distributions (which ignore layer
//! geometry) and fan-scaled families, plus widened variants of the
//! fan-scaled uniform rule. Fans count the kernel area times channels:
//! fan_in = K*K*C_in and fan_out = K*K*C_out for convolutions, the two
//! matrix dimensions for dense layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Initializer {
    RandUniSmall,
    RandUniMed,
    RandUniLarge,
    RandNormSmall,
    RandNormMed,
    RandNormLarge,
    GlorotUni,
    GlorotNorm,
    HeUni,
    HeNorm,
    ModGlorotUniMed,
    ModGlorotUniLarge,
}

use Initializer::*;

impl Initializer {
    pub const ALL: [Initializer; 12] = [
        RandUniSmall,
        RandUniMed,
        RandUniLarge,
        RandNormSmall,
        RandNormMed,
        RandNormLarge,
        GlorotUni,
        GlorotNorm,
        HeUni,
        HeNorm,
        ModGlorotUniMed,
        ModGlorotUniLarge,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RandUniSmall => "RandUni_Small",
            RandUniMed => "RandUni_Med",
            RandUniLarge => "RandUni_Large",
            RandNormSmall => "RandNorm_Small",
            RandNormMed => "RandNorm_Med",
            RandNormLarge => "RandNorm_Large",
            GlorotUni => "GlorotUni",
            GlorotNorm => "GlorotNorm",
            HeUni => "HeUni",
            HeNorm => "HeNorm",
            ModGlorotUniMed => "ModGlorotUni_Med",
            ModGlorotUniLarge => "ModGlorotUni_Large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|i| i.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|i| i.name()).collect();
                Error::config(format!("unknown initializer '{s}'; expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Initializer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Receptive-field fan counts of a weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FanInfo {
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fans of a conv (OIHW) or dense (in, out) weight shape.
pub fn fan_of(shape: &[usize]) -> Result<FanInfo> {
    match shape {
        [o, i, kh, kw] => Ok(FanInfo { fan_in: i * kh * kw, fan_out: o * kh * kw }),
        [i, o] => Ok(FanInfo { fan_in: *i, fan_out: *o }),
        other => Err(Error::shape(format!("no fan rule for weight shape {other:?}"))),
    }
}

/// The sampling rule of one initializer given the target fans.
/// Uniform(a) means U[-a, a]; Normal(s) means N(0, s^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DrawRule {
    Uniform(f64),
    Normal(f64),
}

pub fn draw_rule(init: Initializer, fan: FanInfo) -> DrawRule {
    let fi = fan.fan_in as f64;
    let fo = fan.fan_out as f64;
    match init {
        RandUniSmall => DrawRule::Uniform(0.25),
        RandUniMed => DrawRule::Uniform(0.5),
        RandUniLarge => DrawRule::Uniform(1.0),
        RandNormSmall => DrawRule::Normal(0.1),
        RandNormMed => DrawRule::Normal(0.5),
        RandNormLarge => DrawRule::Normal(1.0),
        GlorotUni => DrawRule::Uniform((6.0 / (fi + fo)).sqrt()),
        GlorotNorm => DrawRule::Normal((2.0 / (fi + fo)).sqrt()),
        HeUni => DrawRule::Uniform((6.0 / fi).sqrt()),
        HeNorm => DrawRule::Normal((2.0 / fi).sqrt()),
        ModGlorotUniMed => DrawRule::Uniform((36.0 / (fi + fo)).sqrt()),
        ModGlorotUniLarge => DrawRule::Uniform((1296.0 / (fi + fo)).sqrt()),
    }
}

/// Sample a weight tensor. The fan is derived from the shape.
pub fn init_tensor<T: Real, R: Rng>(shape: &[usize], init: Initializer, rng: &mut R) -> Result<Tensor<T>> {
    let fan = fan_of(shape)?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = match draw_rule(init, fan) {
        DrawRule::Uniform(a) => (0..n).map(|_| T::from_f64(rng.gen_range(-a..=a))).collect(),
        DrawRule::Normal(s) => {
            let dist = Normal::new(0.0, s).map_err(|e| Error::config(format!("normal({s}): {e}")))?;
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        }
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn twelve_distinct_names_round_trip() {
        assert_eq!(Initializer::ALL.len(), 12);
        let mut names: Vec<&str> = Initializer::ALL.iter().map(|i| i.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 12);
        for init in Initializer::ALL {
            assert_eq!(Initializer::parse(init.name()).unwrap(), init);
            assert_eq!(Initializer::parse(&init.name().to_lowercase()).unwrap(), init);
        }
        assert!(Initializer::parse("Glorot").is_err());
    }

    #[test]
    fn conv_fans_count_kernel_area() {
        // 3x3 kernel, 32 in, 16 out: fans 288 and 144.
        let fan = fan_of(&[16, 32, 3, 3]).unwrap();
        assert_eq!(fan.fan_in, 288);
        assert_eq!(fan.fan_out, 144);
        let dense = fan_of(&[256, 10]).unwrap();
        assert_eq!(dense.fan_in, 256);
        assert_eq!(dense.fan_out, 10);
        assert!(fan_of(&[3, 3, 3]).is_err());
    }

    #[test]
    fn glorot_uniform_bound_value() {
        // sqrt(6 / (288 + 144)) = sqrt(6/432).
        let fan = fan_of(&[16, 32, 3, 3]).unwrap();
        match draw_rule(Initializer::GlorotUni, fan) {
            DrawRule::Uniform(a) => assert_relative_eq!(a, 0.11785113019775793, epsilon = 1e-15),
            other => panic!("unexpected rule {other:?}"),
        }
    }

    #[test]
    fn widened_glorot_scales_by_constant_ratio() {
        let fan = fan_of(&[16, 16, 3, 3]).unwrap();
        let base = match draw_rule(Initializer::GlorotUni, fan) {
            DrawRule::Uniform(a) => a,
            _ => unreachable!(),
        };
        let med = match draw_rule(Initializer::ModGlorotUniMed, fan) {
            DrawRule::Uniform(a) => a,
            _ => unreachable!(),
        };
        let large = match draw_rule(Initializer::ModGlorotUniLarge, fan) {
            DrawRule::Uniform(a) => a,
            _ => unreachable!(),
        };
        assert_relative_eq!(med / base, 6.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(large / base, 1296.0f64.sqrt() / 6.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn he_rules_use_fan_in_only() {
        let fan = FanInfo { fan_in: 150, fan_out: 9999 };
        match draw_rule(Initializer::HeUni, fan) {
            DrawRule::Uniform(a) => assert_relative_eq!(a, (6.0 / 150.0f64).sqrt()),
            _ => unreachable!(),
        }
        match draw_rule(Initializer::HeNorm, fan) {
            DrawRule::Normal(s) => assert_relative_eq!(s, (2.0 / 150.0f64).sqrt()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn empirical_std_matches_rule_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shape = [8, 8, 5, 5]; // 1600 weights per draw
        let fan = fan_of(&shape).unwrap();
        for init in Initializer::ALL {
            let mut sq = 0.0f64;
            let mut n = 0usize;
            for _ in 0..625 {
                let t: Tensor<f64> = init_tensor(&shape, init, &mut rng).unwrap();
                sq += t.data().iter().map(|&v| v * v).sum::<f64>();
                n += t.numel();
            }
            let std = (sq / n as f64).sqrt();
            let expected = match draw_rule(init, fan) {
                DrawRule::Uniform(a) => a / 3.0f64.sqrt(),
                DrawRule::Normal(s) => s,
            };
            let rel = (std - expected).abs() / expected;
            assert!(rel < 0.01, "{}: std {std} vs {expected} (rel {rel})", init.name());
        }
    }

    #[test]
    fn uniform_draws_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let t: Tensor<f64> = init_tensor(&[4, 4, 3, 3], Initializer::RandUniSmall, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| (-0.25..=0.25).contains(&v)));
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Tensor<f32> =
            init_tensor(&[8, 8, 3, 3], Initializer::HeNorm, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor<f32> =
            init_tensor(&[8, 8, 3, 3], Initializer::HeNorm, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
