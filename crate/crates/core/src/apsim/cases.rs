//! Case sampling: where the stimulus starts and where the scar sits, drawn
//! from training pools or from pools shifted away from them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{Geometry, TissueMap};

use super::SimConfig;

const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DifficultyTag {
    Train,
    ScarLExcL,
    ScarLExcH,
    ScarHExcL,
    ScarHExcH,
    /// Test cases drawn from the training pools under a rotated forward
    /// operator, in whole degrees.
    Angle(i32),
}

impl DifficultyTag {
    pub const PATHOLOGY_TESTS: [DifficultyTag; 4] = [
        DifficultyTag::ScarLExcL,
        DifficultyTag::ScarLExcH,
        DifficultyTag::ScarHExcL,
        DifficultyTag::ScarHExcH,
    ];

    /// Which pool each varied parameter is drawn from.
    fn levels(self) -> (Level, Level) {
        use DifficultyTag::*;
        match self {
            Train | Angle(_) => (Level::Train, Level::Train),
            ScarLExcL => (Level::Low, Level::Low),
            ScarLExcH => (Level::Low, Level::High),
            ScarHExcL => (Level::High, Level::Low),
            ScarHExcH => (Level::High, Level::High),
        }
    }
}

impl fmt::Display for DifficultyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Train => f.write_str("train"),
            Self::ScarLExcL => f.write_str("scarL_excL"),
            Self::ScarLExcH => f.write_str("scarL_excH"),
            Self::ScarHExcL => f.write_str("scarH_excL"),
            Self::ScarHExcH => f.write_str("scarH_excH"),
            Self::Angle(a) => write!(f, "angle:{a:+}"),
        }
    }
}

impl FromStr for DifficultyTag {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Self::Train,
            "scarL_excL" => Self::ScarLExcL,
            "scarL_excH" => Self::ScarLExcH,
            "scarH_excL" => Self::ScarHExcL,
            "scarH_excH" => Self::ScarHExcH,
            _ => {
                let angle = s
                    .strip_prefix("angle:")
                    .and_then(|a| a.strip_prefix('+').unwrap_or(a).parse::<i32>().ok())
                    .ok_or_else(|| CoreError::config(format!("unknown split `{s}`")))?;
                Self::Angle(angle)
            }
        })
    }
}

impl TryFrom<String> for DifficultyTag {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DifficultyTag> for String {
    fn from(t: DifficultyTag) -> String {
        t.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Level {
    Train,
    Low,
    High,
}

/// Inclusive rectangle of lattice coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub i: [usize; 2],
    pub j: [usize; 2],
}

impl Block {
    fn contains(&self, (i, j): (usize, usize)) -> bool {
        (self.i[0]..=self.i[1]).contains(&i) && (self.j[0]..=self.j[1]).contains(&j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub exc_train: Block,
    pub scar_train: Block,
    pub scar_radius: usize,
    /// Low shift: nearest training member at distance in `1..=dist_low`.
    pub dist_low: usize,
    /// High shift: nearest training member at distance `≥ dist_high`.
    pub dist_high: usize,
}

impl PoolConfig {
    /// Stimulus origins train in the lower-left region, scars in the upper
    /// right quadrant.
    pub fn for_grid(nx: usize, ny: usize) -> Self {
        Self {
            exc_train: Block {
                i: [0, (3 * nx / 8).max(1) - 1],
                j: [0, (ny / 2).max(1) - 1],
            },
            scar_train: Block {
                i: [nx / 2, nx - 1],
                j: [ny / 2, ny - 1],
            },
            scar_radius: 2,
            dist_low: 1,
            dist_high: 3,
        }
    }
}

/// Node pools for both varied parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Pools {
    pub exc: [Vec<usize>; 3],
    pub scar: [Vec<usize>; 3],
}

impl Pools {
    pub fn build(geom: &Geometry, cfg: &PoolConfig) -> Result<Self> {
        if cfg.dist_low == 0 || cfg.dist_high <= cfg.dist_low {
            return Err(CoreError::config(format!(
                "need 1 ≤ dist_low < dist_high, got {} and {}",
                cfg.dist_low, cfg.dist_high
            )));
        }
        let split = |block: &Block, what: &str| -> Result<[Vec<usize>; 3]> {
            let train: Vec<usize> = (0..geom.num_nodes())
                .filter(|&n| block.contains(geom.coords(n)))
                .collect();
            if train.is_empty() {
                return Err(CoreError::config(format!(
                    "{what} training pool is empty on a {}×{} grid",
                    geom.nx, geom.ny
                )));
            }
            let nearest = |n: usize| {
                train
                    .iter()
                    .map(|&t| geom.lattice_distance(n, t))
                    .min()
                    .expect("nonempty")
            };
            let low = (0..geom.num_nodes())
                .filter(|&n| (1..=cfg.dist_low).contains(&nearest(n)))
                .collect();
            let high = (0..geom.num_nodes())
                .filter(|&n| nearest(n) >= cfg.dist_high)
                .collect();
            Ok([train, low, high])
        };
        let pools = Self {
            exc: split(&cfg.exc_train, "stimulus")?,
            scar: split(&cfg.scar_train, "scar")?,
        };
        for (name, p) in [("stimulus", &pools.exc), ("scar", &pools.scar)] {
            for (lvl, nodes) in ["train", "low", "high"].iter().zip(p) {
                if nodes.is_empty() {
                    return Err(CoreError::config(format!(
                        "{name} {lvl} pool is empty on a {}×{} grid",
                        geom.nx, geom.ny
                    )));
                }
            }
        }
        Ok(pools)
    }

    fn pool(pools: &[Vec<usize>; 3], level: Level) -> &[usize] {
        match level {
            Level::Train => &pools[0],
            Level::Low => &pools[1],
            Level::High => &pools[2],
        }
    }

    pub fn exc_pool(&self, tag: DifficultyTag) -> &[usize] {
        Self::pool(&self.exc, tag.levels().1)
    }

    pub fn scar_pool(&self, tag: DifficultyTag) -> &[usize] {
        Self::pool(&self.scar, tag.levels().0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub scar_center: usize,
    pub scar_radius: usize,
    pub exc_node: usize,
    pub rotation_deg: f64,
    pub difficulty_tag: DifficultyTag,
    pub rng_seed: u64,
}

#[derive(Clone, Debug)]
pub struct CaseSampler {
    pub pools: Pools,
    pub config: PoolConfig,
    pub a_healthy: f64,
    pub a_scar: f64,
}

impl CaseSampler {
    pub fn new(geom: &Geometry, config: PoolConfig, sim: &SimConfig) -> Result<Self> {
        Ok(Self {
            pools: Pools::build(geom, &config)?,
            config,
            a_healthy: sim.a_healthy,
            a_scar: sim.a_scar,
        })
    }

    /// Draws a scar center and a stimulus origin outside the scar. The
    /// rotation of angle splits comes from the tag; other splits use 0°.
    pub fn sample(
        &self,
        geom: &Geometry,
        seed: u64,
        tag: DifficultyTag,
    ) -> Result<(TissueMap, usize, CaseMeta)> {
        let rotation_deg = match tag {
            DifficultyTag::Angle(a) => a as f64,
            _ => 0.0,
        };
        self.sample_rotated(geom, seed, tag, rotation_deg)
    }

    pub fn sample_rotated(
        &self,
        geom: &Geometry,
        seed: u64,
        tag: DifficultyTag,
        rotation_deg: f64,
    ) -> Result<(TissueMap, usize, CaseMeta)> {
        let scar_pool = self.pools.scar_pool(tag);
        let exc_pool = self.pools.exc_pool(tag);
        let radius = self.config.scar_radius;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_DRAWS {
            let center = scar_pool[rng.gen_range(0..scar_pool.len())];
            let exc = exc_pool[rng.gen_range(0..exc_pool.len())];
            if geom.lattice_distance(center, exc) <= radius {
                continue;
            }
            let tissue = TissueMap::with_scar(geom, center, radius, self.a_healthy, self.a_scar)?;
            let meta = CaseMeta {
                scar_center: center,
                scar_radius: radius,
                exc_node: exc,
                rotation_deg,
                difficulty_tag: tag,
                rng_seed: seed,
            };
            return Ok((tissue, exc, meta));
        }
        Err(CoreError::config(format!(
            "no stimulus origin outside the scar for split {tag}"
        )))
    }
}

/// Samples with the default pools for the geometry and default tissue
/// parameters.
pub fn sample_case(
    seed: u64,
    split: DifficultyTag,
    geom: &Geometry,
) -> Result<(TissueMap, usize, CaseMeta)> {
    CaseSampler::new(
        geom,
        PoolConfig::for_grid(geom.nx, geom.ny),
        &SimConfig::default(),
    )?
    .sample(geom, seed, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;

    fn grid() -> Geometry {
        build_grid(8, 8, 16, 12.0).unwrap()
    }

    fn nearest(geom: &Geometry, n: usize, pool: &[usize]) -> usize {
        pool.iter()
            .map(|&t| geom.lattice_distance(n, t))
            .min()
            .unwrap()
    }

    #[test]
    fn tags_round_trip() {
        for tag in [
            DifficultyTag::Train,
            DifficultyTag::ScarHExcL,
            DifficultyTag::Angle(3),
            DifficultyTag::Angle(-20),
            DifficultyTag::Angle(0),
        ] {
            assert_eq!(tag.to_string().parse::<DifficultyTag>().unwrap(), tag);
            let json = serde_json::to_string(&tag).unwrap();
            assert_eq!(serde_json::from_str::<DifficultyTag>(&json).unwrap(), tag);
        }
        assert_eq!(DifficultyTag::Angle(3).to_string(), "angle:+3");
        assert_eq!(
            "angle:3".parse::<DifficultyTag>().unwrap(),
            DifficultyTag::Angle(3)
        );
        assert!("scarM_excL".parse::<DifficultyTag>().is_err());
        assert!("angle:x".parse::<DifficultyTag>().is_err());
    }

    #[test]
    fn pools_are_disjoint_and_shifted() {
        let g = grid();
        let cfg = PoolConfig::for_grid(8, 8);
        let p = Pools::build(&g, &cfg).unwrap();
        for pools in [&p.exc, &p.scar] {
            let [train, low, high] = pools;
            for &n in low {
                assert!(!train.contains(&n));
                assert!(nearest(&g, n, train) <= cfg.dist_low);
            }
            for &n in high {
                assert!(nearest(&g, n, train) >= cfg.dist_high);
            }
        }
    }

    #[test]
    fn same_seed_same_case() {
        let g = grid();
        let a = sample_case(42, DifficultyTag::ScarLExcH, &g).unwrap();
        let b = sample_case(42, DifficultyTag::ScarLExcH, &g).unwrap();
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn split_definitions_hold() {
        let g = grid();
        let s = CaseSampler::new(&g, PoolConfig::for_grid(8, 8), &SimConfig::default()).unwrap();
        for seed in 0..200 {
            let (tissue, exc, meta) = s.sample(&g, seed, DifficultyTag::ScarHExcL).unwrap();
            assert!(nearest(&g, meta.scar_center, &s.pools.scar[0]) >= 3);
            assert!(nearest(&g, exc, &s.pools.exc[0]) <= 1);
            assert!(!tissue.scar_mask[exc]);
        }
    }

    #[test]
    fn train_draws_stay_in_pool() {
        let g = grid();
        let s = CaseSampler::new(&g, PoolConfig::for_grid(8, 8), &SimConfig::default()).unwrap();
        for seed in 0..1000 {
            let (_, exc, meta) = s.sample(&g, seed, DifficultyTag::Train).unwrap();
            assert!(s.pools.scar[0].contains(&meta.scar_center));
            assert!(s.pools.exc[0].contains(&exc));
        }
    }

    #[test]
    fn angle_tag_sets_rotation() {
        let g = grid();
        let (_, _, meta) = sample_case(1, DifficultyTag::Angle(-7), &g).unwrap();
        assert_eq!(meta.rotation_deg, -7.0);
    }

    #[test]
    fn empty_pools_are_config_errors() {
        let g = build_grid(2, 2, 4, 10.0).unwrap();
        assert!(matches!(
            sample_case(0, DifficultyTag::Train, &g),
            Err(CoreError::Config(_))
        ));
    }
}
