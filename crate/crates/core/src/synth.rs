//! Synthetic cross-view scenes: an over-view reconstruction and a
//! street-view reconstruction of the same block with complementary surface
//! coverage, plus the ground-truth transform between their frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point3, PointCloud3};
use crate::error::{Error, Result};
use crate::transform::RigidTransform3;

/// Axis-aligned box building footprint, meters.
#[derive(Clone, Copy, Debug)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub buildings: Vec<Building>,
    /// Surface sampling density for the over-view cloud, points/m^2.
    pub overview_density: f64,
    /// Surface sampling density for the street-view cloud, points/m^2.
    pub street_density: f64,
    /// The over-view sees facades only above this height fraction.
    pub overview_facade_min_frac: f64,
    /// The street view sees facades only below this height fraction.
    pub street_facade_max_frac: f64,
    /// Width of the ground strip around each footprint in the street view.
    pub ground_margin: f64,
    /// Isotropic Gaussian jitter on every sampled point, meters.
    pub noise_sigma: f64,
    /// Gaussian error of the GNSS-mapped origin, meters.
    pub gnss_noise_sigma: f64,
    /// Ground truth: maps the street-view frame into the over-view frame.
    pub t_gt: RigidTransform3<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            buildings: Vec::new(),
            overview_density: 70.0,
            street_density: 35.0,
            overview_facade_min_frac: 0.6,
            street_facade_max_frac: 0.8,
            ground_margin: 4.0,
            noise_sigma: 0.03,
            gnss_noise_sigma: 2.0,
            t_gt: RigidTransform3::identity(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buildings.is_empty() {
            return Err(Error::Config("scene has no buildings".into()));
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if b.width <= 0.0 || b.depth <= 0.0 || b.height <= 0.0 {
                return Err(Error::Config(format!(
                    "building {i} has a non-positive dimension"
                )));
            }
        }
        if self.overview_density <= 0.0 || self.street_density <= 0.0 {
            return Err(Error::Config("densities must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overview_facade_min_frac)
            || !(0.0..=1.0).contains(&self.street_facade_max_frac)
        {
            return Err(Error::Config("facade fractions must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A generated scene: the over-view cloud in the world frame, the
/// street-view cloud in its own displaced frame, the ground truth mapping
/// street frame to world, and the noisy GNSS estimate of the street frame
/// origin.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub visual: PointCloud3<f64>,
    pub lidar: PointCloud3<f64>,
    pub t_gt: RigidTransform3<f64>,
    pub gnss_origin: Point3<f64>,
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn gauss(&mut self) -> f64 {
        // Box-Muller
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn jitter(&mut self, p: Point3<f64>, sigma: f64) -> Point3<f64> {
        if sigma <= 0.0 {
            return p;
        }
        Point3::new(
            p.x + sigma * self.gauss(),
            p.y + sigma * self.gauss(),
            p.z + sigma * self.gauss(),
        )
    }
}

/// Walls of a building: (origin, along-axis unit, length) per side, with an
/// outward normal irrelevant here.
fn facades(b: &Building) -> [([f64; 2], [f64; 2], f64); 4] {
    let (x0, x1) = (b.cx - b.width / 2.0, b.cx + b.width / 2.0);
    let (y0, y1) = (b.cy - b.depth / 2.0, b.cy + b.depth / 2.0);
    [
        ([x0, y0], [1.0, 0.0], b.width),  // south
        ([x0, y1], [1.0, 0.0], b.width),  // north
        ([x0, y0], [0.0, 1.0], b.depth),  // west
        ([x1, y0], [0.0, 1.0], b.depth),  // east
    ]
}

fn sample_count(density: f64, area: f64) -> usize {
    (density * area).ceil().max(1.0) as usize
}

pub fn synth_scene(config: &SceneConfig) -> Result<SynthScene> {
    config.validate()?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let sigma = config.noise_sigma;

    let mut visual = Vec::new();
    let mut lidar_world = Vec::new();

    for b in &config.buildings {
        let (x0, y0) = (b.cx - b.width / 2.0, b.cy - b.depth / 2.0);

        // over-view: roof
        let n = sample_count(config.overview_density, b.width * b.depth);
        for _ in 0..n {
            let p = Point3::new(
                x0 + s.rng.gen_range(0.0..b.width),
                y0 + s.rng.gen_range(0.0..b.depth),
                b.height,
            );
            visual.push(s.jitter(p, sigma));
        }

        // facades: upper band for the over-view, lower band for the street view
        for (origin, along, len) in facades(b) {
            let hi_band = b.height * (1.0 - config.overview_facade_min_frac);
            let n = sample_count(config.overview_density, len * hi_band);
            for _ in 0..n {
                let t = s.rng.gen_range(0.0..len);
                let z = s
                    .rng
                    .gen_range(b.height * config.overview_facade_min_frac..b.height);
                let p = Point3::new(origin[0] + along[0] * t, origin[1] + along[1] * t, z);
                visual.push(s.jitter(p, sigma));
            }

            let lo_band = b.height * config.street_facade_max_frac;
            let n = sample_count(config.street_density, len * lo_band);
            for _ in 0..n {
                let t = s.rng.gen_range(0.0..len);
                let z = s.rng.gen_range(0.0..lo_band);
                let p = Point3::new(origin[0] + along[0] * t, origin[1] + along[1] * t, z);
                lidar_world.push(s.jitter(p, sigma));
            }
        }

        // street view: ground strip around the footprint
        let m = config.ground_margin;
        let (ow, od) = (b.width + 2.0 * m, b.depth + 2.0 * m);
        let strip_area = ow * od - b.width * b.depth;
        let n = sample_count(config.street_density, strip_area);
        let mut accepted = 0;
        while accepted < n {
            let x = b.cx + s.rng.gen_range(-ow / 2.0..ow / 2.0);
            let y = b.cy + s.rng.gen_range(-od / 2.0..od / 2.0);
            let inside = (x - b.cx).abs() < b.width / 2.0 && (y - b.cy).abs() < b.depth / 2.0;
            if inside {
                continue;
            }
            lidar_world.push(s.jitter(Point3::new(x, y, 0.0), sigma));
            accepted += 1;
        }
    }

    // express the street-view cloud in its own frame
    let world_from_lidar = config.t_gt;
    let lidar_from_world = world_from_lidar.inverse();
    let lidar = PointCloud3::new(
        lidar_world
            .iter()
            .map(|p| lidar_from_world.apply_point(*p))
            .collect(),
    );

    let true_origin = Point3::from_vector(world_from_lidar.translation());
    let gnss_origin = s.jitter(true_origin, config.gnss_noise_sigma);

    Ok(SynthScene {
        visual: PointCloud3::new(visual),
        lidar,
        t_gt: world_from_lidar,
        gnss_origin,
    })
}

/// The four-building block used by the end-to-end harnesses.
pub fn four_building_block() -> Vec<Building> {
    vec![
        Building {
            cx: 10.0,
            cy: 10.0,
            width: 14.0,
            depth: 10.0,
            height: 15.0,
        },
        Building {
            cx: 42.0,
            cy: 12.0,
            width: 10.0,
            depth: 16.0,
            height: 11.0,
        },
        Building {
            cx: 12.0,
            cy: 44.0,
            width: 9.0,
            depth: 13.0,
            height: 19.0,
        },
        Building {
            cx: 44.0,
            cy: 42.0,
            width: 18.0,
            depth: 9.0,
            height: 8.0,
        },
    ]
}
