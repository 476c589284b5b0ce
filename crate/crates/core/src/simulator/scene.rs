//! Synthetic scenes with class prototypes and per-domain feature shifts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::iou;
use crate::protocol::ClassId;
use crate::rng::SeedStream;

/// Knobs of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Region feature width; detector tokens append the 4 box coordinates.
    pub d_feat: usize,
    pub n_regions: usize,
    /// Gaussian noise added to every region feature.
    pub noise: f64,
    pub prototype_norm: f64,
    /// Squared cosine between every class prototype and a direction shared
    /// by all objects; 0 gives unrelated classes.
    pub object_share: f64,
    /// Expected norm of background region content.
    pub background_norm: f64,
    /// 0 keeps every domain identical, 1 applies a full random rotation.
    pub domain_shift: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that an object in a scene belongs to a withheld class.
    pub unknown_rate: f64,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_feat: 28,
            n_regions: 12,
            noise: 0.3,
            prototype_norm: 3.0,
            object_share: 0.5,
            background_norm: 1.0,
            domain_shift: 0.5,
            min_objects: 1,
            max_objects: 3,
            unknown_rate: 0.25,
            min_box: 0.15,
            max_box: 0.35,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("world: {msg}")));
        if self.d_feat < 2 || self.n_regions == 0 {
            return bad("d_feat must be >= 2 and n_regions >= 1");
        }
        if self.min_objects > self.max_objects || self.max_objects > self.n_regions {
            return bad("need min_objects <= max_objects <= n_regions");
        }
        if ![self.domain_shift, self.unknown_rate, self.object_share].iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("domain_shift, unknown_rate and object_share must lie in [0, 1]");
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box && self.max_box < 1.0) {
            return bad("need 0 < min_box <= max_box < 1");
        }
        if !(self.noise >= 0.0 && self.prototype_norm > 0.0 && self.background_norm >= 0.0) {
            return bad("noise and norms must be non-negative");
        }
        Ok(())
    }

    /// Width of a detector token.
    pub fn token_dim(&self) -> usize {
        self.d_feat + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DomainTransform {
    matrix: Matrix,
    bias: Vec<f64>,
}

impl DomainTransform {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.matvec(x).expect("transform matches d_feat");
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Vec<f64>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub bbox: [f64; 4],
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub domain: String,
    pub regions: Vec<Region>,
    pub objects: Vec<GtObject>,
}

impl Scene {
    /// One row per region: feature followed by the box.
    pub fn tokens(&self) -> Matrix {
        let d = self.regions[0].feature.len() + 4;
        let mut data = Vec::with_capacity(self.regions.len() * d);
        for r in &self.regions {
            data.extend_from_slice(&r.feature);
            data.extend_from_slice(&r.bbox);
        }
        Matrix::from_vec(self.regions.len(), d, data)
    }
}

/// Fixed class prototypes and domain transforms derived from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    prototypes: BTreeMap<ClassId, Vec<f64>>,
    domains: BTreeMap<String, DomainTransform>,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Matrix {
    // Gram-Schmidt on Gaussian rows.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian(rng, n);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-8 {
            rows.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    Matrix::from_vec(n, n, rows.concat())
}

impl World {
    pub fn new(seeds: &SeedStream, classes: &[ClassId], domains: &[String], config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_feat;
        let protos = seeds.child("prototype");
        let unit = |mut v: Vec<f64>| {
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= len);
            v
        };
        let shared = unit(gaussian(&mut protos.rng("shared"), d));
        let (a, b) = (config.object_share.sqrt(), (1.0 - config.object_share).sqrt());
        let prototypes = classes
            .iter()
            .map(|&c| {
                let own = unit(gaussian(&mut protos.rng(&c.to_string()), d));
                let v = unit(shared.iter().zip(&own).map(|(s, o)| a * s + b * o).collect());
                (c, v.into_iter().map(|x| x * config.prototype_norm).collect())
            })
            .collect();
        let dom = seeds.child("domain");
        let s = config.domain_shift;
        let domains = domains
            .iter()
            .map(|tag| {
                let mut rng = dom.rng(tag);
                let rot = random_orthogonal(&mut rng, d);
                let scale = 1.0 + s * rng.random_range(-0.25..0.25);
                let mut m = Matrix::identity(d).scale(1.0 - s).add(&rot.scale(s)).expect("same shape");
                m = m.scale(scale);
                let bias = gaussian(&mut rng, d).into_iter().map(|x| x * s * 0.3).collect();
                (tag.clone(), DomainTransform { matrix: m, bias })
            })
            .collect();
        Ok(Self {
            config,
            prototypes,
            domains,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn has_domain(&self, tag: &str) -> bool {
        self.domains.contains_key(tag)
    }

    /// Samples a scene. Classes and boxes are drawn before any feature, so
    /// the same seed gives the same layout in every domain.
    pub fn generate_scene(&self, seed: u64, image_id: u64, domain: &str, classes: &[ClassId], n_objects: usize) -> Result<Scene> {
        if n_objects > 0 && classes.is_empty() {
            return Err(Error::Config("objects requested from an empty class set".into()));
        }
        self.check_classes(classes)?;
        self.sample(seed, image_id, domain, n_objects, &mut |rng| classes[rng.random_range(0..classes.len())])
    }

    /// Like [`World::generate_scene`], but each object comes from `withheld`
    /// with probability `unknown_rate` (when that set is non-empty) and from
    /// `known` otherwise.
    pub fn generate_open_scene(
        &self,
        seed: u64,
        image_id: u64,
        domain: &str,
        known: &[ClassId],
        withheld: &[ClassId],
        n_objects: usize,
    ) -> Result<Scene> {
        if n_objects > 0 && known.is_empty() && withheld.is_empty() {
            return Err(Error::Config("objects requested from an empty class set".into()));
        }
        self.check_classes(known)?;
        self.check_classes(withheld)?;
        let rate = if known.is_empty() { 1.0 } else if withheld.is_empty() { 0.0 } else { self.config.unknown_rate };
        self.sample(seed, image_id, domain, n_objects, &mut |rng| {
            let pool = if rng.random_bool(rate) { withheld } else { known };
            pool[rng.random_range(0..pool.len())]
        })
    }

    fn check_classes(&self, classes: &[ClassId]) -> Result<()> {
        match classes.iter().find(|c| !self.prototypes.contains_key(c)) {
            Some(c) => Err(Error::Config(format!("class {c} has no prototype"))),
            None => Ok(()),
        }
    }

    fn sample(&self, seed: u64, image_id: u64, domain: &str, n_objects: usize, pick: &mut dyn FnMut(&mut ChaCha8Rng) -> ClassId) -> Result<Scene> {
        let transform = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
        let cfg = &self.config;
        if n_objects > cfg.n_regions {
            return Err(Error::Config(format!(
                "{n_objects} objects do not fit in {} regions",
                cfg.n_regions
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects: Vec<GtObject> = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let class = pick(&mut rng);
            let mut bbox = self.random_box(&mut rng);
            for _ in 0..50 {
                if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.1) {
                    break;
                }
                bbox = self.random_box(&mut rng);
            }
            objects.push(GtObject { bbox, class });
        }
        let background: Vec<[f64; 4]> = (n_objects..cfg.n_regions).map(|_| self.random_box(&mut rng)).collect();
        let mut order: Vec<usize> = (0..cfg.n_regions).collect();
        order.shuffle(&mut rng);

        let d = cfg.d_feat;
        let bg_scale = cfg.background_norm / (d as f64).sqrt();
        let mut regions = Vec::with_capacity(cfg.n_regions);
        for &slot in &order {
            let (content, bbox) = if slot < n_objects {
                (self.prototypes[&objects[slot].class].clone(), objects[slot].bbox)
            } else {
                let c = gaussian(&mut rng, d).into_iter().map(|x| x * bg_scale).collect();
                (c, background[slot - n_objects])
            };
            let mut feature = transform.apply(&content);
            for (f, e) in feature.iter_mut().zip(gaussian(&mut rng, d)) {
                *f += cfg.noise * e;
            }
            regions.push(Region { feature, bbox });
        }
        Ok(Scene {
            image_id,
            domain: domain.to_string(),
            regions,
            objects,
        })
    }

    fn random_box(&self, rng: &mut impl Rng) -> [f64; 4] {
        let (lo, hi) = (self.config.min_box, self.config.max_box);
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        [x, y, w, h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(
            &SeedStream::new(0),
            &[1, 2, 3],
            &["day".to_string(), "night".to_string()],
            WorldConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn background_only() {
        let s = world().generate_scene(0, 1, "day", &[1, 2], 0).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.regions.len(), 12);
        assert_eq!(s.tokens().shape(), (12, 32));
    }

    #[test]
    fn deterministic() {
        let w = world();
        assert_eq!(
            w.generate_scene(5, 1, "day", &[1, 2], 3).unwrap(),
            w.generate_scene(5, 1, "day", &[1, 2], 3).unwrap()
        );
    }

    #[test]
    fn domains_share_layout() {
        let w = world();
        let a = w.generate_scene(9, 1, "day", &[1, 2, 3], 2).unwrap();
        let b = w.generate_scene(9, 1, "night", &[1, 2, 3], 2).unwrap();
        assert_eq!(a.objects, b.objects);
        assert_ne!(a.regions[0].feature, b.regions[0].feature);
        assert_eq!(a.regions[0].bbox, b.regions[0].bbox);
    }

    #[test]
    fn boxes_inside_unit_square() {
        let w = world();
        for seed in 0..50 {
            let s = w.generate_scene(seed, seed, "night", &[1, 2, 3], 3).unwrap();
            for r in &s.regions {
                let [x, y, bw, bh] = r.bbox;
                assert!(bw > 0.0 && bh > 0.0 && x >= 0.0 && y >= 0.0);
                assert!(x + bw <= 1.0 + 1e-12 && y + bh <= 1.0 + 1e-12);
                assert!(r.feature.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn errors() {
        let w = world();
        assert!(matches!(w.generate_scene(0, 1, "dusk", &[1], 1), Err(Error::UnknownDomain(_))));
        assert!(w.generate_scene(0, 1, "day", &[1], 13).is_err());
        assert!(w.generate_scene(0, 1, "day", &[9], 1).is_err());
    }

    #[test]
    fn open_scene_mixes_withheld() {
        let w = world();
        let mut seen_withheld = false;
        for seed in 0..40 {
            let s = w.generate_open_scene(seed, seed, "day", &[1, 2], &[3], 3).unwrap();
            assert!(s.objects.iter().all(|o| [1, 2, 3].contains(&o.class)));
            seen_withheld |= s.objects.iter().any(|o| o.class == 3);
        }
        assert!(seen_withheld);
        let only = w.generate_open_scene(1, 1, "day", &[1], &[], 3).unwrap();
        assert!(only.objects.iter().all(|o| o.class == 1));
    }
}
