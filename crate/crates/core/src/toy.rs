//! Procedural street scenes with pixel-exact label maps.
//!
//! A scene is painted back to front: sky above a random horizon, a
//! sidewalk strip and road below it, buildings standing on the horizon,
//! tree discs, cars on the road, poles and pedestrians. Each painted
//! object picks one of the fine classes of its shape family, and the label
//! map records exactly the pixels the object covered.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grouping::{LabelMap, RemapTable, SuperClass};
use crate::raster::RgbImage;
use crate::rng::{self, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum ShapeFamily {
    Sky,
    Road,
    Sidewalk,
    Building,
    Vegetation,
    Car,
    Pole,
    Person,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sky,
        ShapeFamily::Road,
        ShapeFamily::Sidewalk,
        ShapeFamily::Building,
        ShapeFamily::Vegetation,
        ShapeFamily::Car,
        ShapeFamily::Pole,
        ShapeFamily::Person,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sky => "sky",
            ShapeFamily::Road => "road",
            ShapeFamily::Sidewalk => "sidewalk",
            ShapeFamily::Building => "building",
            ShapeFamily::Vegetation => "vegetation",
            ShapeFamily::Car => "car",
            ShapeFamily::Pole => "pole",
            ShapeFamily::Person => "person",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyClass {
    pub name: String,
    pub family: ShapeFamily,
    pub color: [u8; 3],
}

/// Inclusive range.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

const fn span(min: f64, max: f64) -> Span {
    Span { min, max }
}

/// Object count and size ranges; sizes are fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub width: Span,
    pub height: Span,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToySceneSpec {
    pub resolution: usize,
    /// Fine classes; label value = position in this list.
    pub classes: Vec<ToyClass>,
    /// Horizon row as a fraction of the height.
    pub horizon: Span,
    pub sidewalk_height: Span,
    pub buildings: ObjectSpec,
    /// `width` is the disc radius; `height` is unused.
    pub trees: ObjectSpec,
    pub cars: ObjectSpec,
    /// `height` is unused: poles reach from the sidewalk to above the horizon.
    pub poles: ObjectSpec,
    pub persons: ObjectSpec,
    /// Per-object, per-channel color offset bound.
    pub color_jitter: u8,
    /// Per-pixel noise bound.
    pub pixel_noise: u8,
}

impl Default for ToySceneSpec {
    /// 24 fine classes, three variants per family.
    fn default() -> Self {
        let variants: [(ShapeFamily, [[u8; 3]; 3]); 8] = [
            (ShapeFamily::Sky, [[110, 160, 230], [150, 190, 235], [185, 200, 215]]),
            (ShapeFamily::Road, [[80, 80, 85], [100, 95, 90], [65, 70, 80]]),
            (ShapeFamily::Sidewalk, [[190, 170, 160], [170, 170, 175], [200, 185, 140]]),
            (ShapeFamily::Building, [[140, 90, 70], [120, 120, 130], [180, 150, 110]]),
            (ShapeFamily::Vegetation, [[60, 140, 50], [40, 100, 40], [110, 150, 60]]),
            (ShapeFamily::Car, [[200, 30, 30], [30, 60, 180], [230, 230, 230]]),
            (ShapeFamily::Pole, [[40, 40, 40], [150, 150, 60], [90, 90, 100]]),
            (ShapeFamily::Person, [[240, 170, 40], [200, 60, 160], [20, 170, 170]]),
        ];
        let classes = variants
            .iter()
            .flat_map(|&(family, colors)| {
                colors.into_iter().enumerate().map(move |(i, color)| ToyClass { name: format!("{}_{i}", family.name()), family, color })
            })
            .collect();
        Self {
            resolution: 64,
            classes,
            horizon: span(0.35, 0.5),
            sidewalk_height: span(0.06, 0.12),
            buildings: ObjectSpec { count_min: 1, count_max: 3, width: span(0.15, 0.35), height: span(0.12, 0.3) },
            trees: ObjectSpec { count_min: 1, count_max: 3, width: span(0.05, 0.1), height: span(0.0, 0.0) },
            cars: ObjectSpec { count_min: 1, count_max: 2, width: span(0.14, 0.25), height: span(0.07, 0.12) },
            poles: ObjectSpec { count_min: 1, count_max: 2, width: span(0.025, 0.04), height: span(0.0, 0.0) },
            persons: ObjectSpec { count_min: 1, count_max: 3, width: span(0.04, 0.07), height: span(0.12, 0.2) },
            color_jitter: 16,
            pixel_noise: 6,
        }
    }
}

impl ToySceneSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self { resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolution < 8 {
            return bad(format!("resolution {} is below the minimum of 8", self.resolution));
        }
        if self.classes.len() > 256 {
            return bad(format!("{} classes do not fit 8-bit labels", self.classes.len()));
        }
        for f in ShapeFamily::ALL {
            if !self.classes.iter().any(|c| c.family == f) {
                return bad(format!("no class for shape family `{}`", f.name()));
            }
        }
        let unit = |name: &str, s: Span| -> Result<()> {
            if !(0.0..=1.0).contains(&s.min) || !(0.0..=1.0).contains(&s.max) || s.min > s.max {
                return Err(Error::Config(format!("{name} range [{}, {}] must be ordered within [0, 1]", s.min, s.max)));
            }
            Ok(())
        };
        unit("horizon", self.horizon)?;
        unit("sidewalk_height", self.sidewalk_height)?;
        if self.horizon.max + self.sidewalk_height.max > 1.0 {
            return bad("horizon plus sidewalk leaves no room for the road".into());
        }
        for (name, o) in [("buildings", self.buildings), ("trees", self.trees), ("cars", self.cars), ("poles", self.poles), ("persons", self.persons)] {
            if o.count_min > o.count_max {
                return bad(format!("{name}: count_min exceeds count_max"));
            }
            unit(name, o.width)?;
            unit(name, o.height)?;
        }
        Ok(())
    }

    /// Fine classes of one family, in label order.
    pub fn classes_of(&self, family: ShapeFamily) -> Vec<usize> {
        self.classes.iter().enumerate().filter(|(_, c)| c.family == family).map(|(i, _)| i).collect()
    }

    /// Groups fine classes by shape family, one super-class per family in
    /// [`ShapeFamily::ALL`] order.
    pub fn remap_table(&self) -> Result<RemapTable> {
        self.validate()?;
        let entries = ShapeFamily::ALL
            .iter()
            .enumerate()
            .map(|(index, &f)| SuperClass { name: f.name().into(), index, sources: self.classes_of(f).into_iter().collect() })
            .collect();
        RemapTable::new(self.classes.len(), entries)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: RgbImage,
    /// Fine-class labels.
    pub labels: LabelMap,
}

struct Canvas<'a> {
    spec: &'a ToySceneSpec,
    rgb: Vec<[i32; 3]>,
    labels: Vec<u8>,
    n: usize,
}

impl Canvas<'_> {
    fn pick(&self, rng: &mut Rng64, family: ShapeFamily) -> (u8, [i32; 3]) {
        let options = self.spec.classes_of(family);
        let class = options[rng.random_range(0..options.len())];
        let j = self.spec.color_jitter as i32;
        let base = self.spec.classes[class].color;
        let color = core::array::from_fn(|k| base[k] as i32 + if j > 0 { rng.random_range(-j..=j) } else { 0 });
        (class as u8, color)
    }

    fn paint(&mut self, y0: usize, y1: usize, x0: usize, x1: usize, class: u8, color: [i32; 3], inside: impl Fn(usize, usize) -> bool) {
        for y in y0..y1.min(self.n) {
            for x in x0..x1.min(self.n) {
                if inside(y, x) {
                    self.labels[y * self.n + x] = class;
                    self.rgb[y * self.n + x] = color;
                }
            }
        }
    }

    fn rect(&mut self, rng: &mut Rng64, family: ShapeFamily, y0: usize, y1: usize, x0: usize, x1: usize) {
        let (class, color) = self.pick(rng, family);
        self.paint(y0, y1, x0, x1, class, color, |_, _| true);
    }
}

fn frac(rng: &mut Rng64, s: Span) -> f64 {
    if s.max > s.min {
        rng.random_range(s.min..=s.max)
    } else {
        s.min
    }
}

fn count(rng: &mut Rng64, o: &ObjectSpec) -> usize {
    rng.random_range(o.count_min..=o.count_max)
}

fn px(f: f64, n: usize) -> usize {
    libm::round(f * n as f64) as usize
}

/// One scene drawn from `rng`.
pub fn make_scene(spec: &ToySceneSpec, rng: &mut Rng64) -> ToySample {
    let n = spec.resolution;
    let mut cv = Canvas { spec, rgb: vec![[0; 3]; n * n], labels: vec![0; n * n], n };
    let horizon = px(frac(rng, spec.horizon), n).max(1);
    let walk_end = (horizon + px(frac(rng, spec.sidewalk_height), n).max(1)).min(n - 1);
    cv.rect(rng, ShapeFamily::Sky, 0, horizon, 0, n);
    cv.rect(rng, ShapeFamily::Sidewalk, horizon, walk_end, 0, n);
    cv.rect(rng, ShapeFamily::Road, walk_end, n, 0, n);

    for _ in 0..count(rng, &spec.buildings) {
        let w = px(frac(rng, spec.buildings.width), n).max(2);
        let h = px(frac(rng, spec.buildings.height), n).max(2);
        let x0 = rng.random_range(0..n.saturating_sub(w / 2).max(1));
        cv.rect(rng, ShapeFamily::Building, horizon.saturating_sub(h), horizon + 1, x0, x0 + w);
    }
    for _ in 0..count(rng, &spec.trees) {
        let r = (frac(rng, spec.trees.width) * n as f64).max(1.5);
        let cx = rng.random_range(0.0..n as f64);
        let cy = horizon as f64 - r * rng.random_range(0.2..0.9);
        let (class, color) = cv.pick(rng, ShapeFamily::Vegetation);
        let inside = move |y: usize, x: usize| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            dy * dy + dx * dx <= r * r
        };
        let y0 = (cy - r).max(0.0) as usize;
        let x0 = (cx - r).max(0.0) as usize;
        cv.paint(y0, (cy + r) as usize + 1, x0, (cx + r) as usize + 1, class, color, inside);
    }
    for _ in 0..count(rng, &spec.cars) {
        let w = px(frac(rng, spec.cars.width), n).max(2);
        let h = px(frac(rng, spec.cars.height), n).max(2);
        let bottom = rng.random_range(walk_end + h.min(n - walk_end)..=n);
        let x0 = rng.random_range(0..n.saturating_sub(w).max(1));
        cv.rect(rng, ShapeFamily::Car, bottom.saturating_sub(h), bottom, x0, x0 + w);
    }
    for _ in 0..count(rng, &spec.poles) {
        let w = px(frac(rng, spec.poles.width), n).max(1);
        let top = horizon.saturating_sub(px(0.15, n));
        let x0 = rng.random_range(0..n.saturating_sub(w).max(1));
        cv.rect(rng, ShapeFamily::Pole, top, walk_end, x0, x0 + w);
    }
    for _ in 0..count(rng, &spec.persons) {
        let w = px(frac(rng, spec.persons.width), n).max(1);
        let h = px(frac(rng, spec.persons.height), n).max(2);
        let x0 = rng.random_range(0..n.saturating_sub(w).max(1));
        let feet = rng.random_range(horizon + 1..=walk_end.max(horizon + 1));
        cv.rect(rng, ShapeFamily::Person, feet.saturating_sub(h), feet, x0, x0 + w);
    }

    let noise = spec.pixel_noise as i32;
    let mut data = Vec::with_capacity(n * n * 3);
    for c in &cv.rgb {
        for &v in c {
            let e = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
            data.push((v + e).clamp(0, 255) as u8);
        }
    }
    ToySample {
        image: RgbImage { width: n, height: n, data },
        labels: LabelMap::new(n, n, spec.classes.len(), cv.labels).expect("labels are class indices"),
    }
}

/// `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn make_toy_corpus(spec: &ToySceneSpec, n: usize, seed: u64) -> Result<Vec<ToySample>> {
    spec.validate()?;
    Ok((0..n).map(|i| make_scene(spec, &mut rng::derive(seed, i as u64))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{class_statistics, remap};

    #[test]
    fn default_spec_has_24_classes_in_8_groups() {
        let spec = ToySceneSpec::default();
        assert_eq!(spec.classes.len(), 24);
        let t = spec.remap_table().unwrap();
        assert_eq!(t.num_super_classes(), 8);
        assert_eq!(t.super_class_of(5), Some(1));
    }

    #[test]
    fn empty_and_deterministic() {
        let spec = ToySceneSpec::with_resolution(32);
        assert!(make_toy_corpus(&spec, 0, 1).unwrap().is_empty());
        assert_eq!(make_toy_corpus(&spec, 5, 9).unwrap(), make_toy_corpus(&spec, 5, 9).unwrap());
        assert_ne!(make_toy_corpus(&spec, 1, 9).unwrap(), make_toy_corpus(&spec, 1, 10).unwrap());
    }

    #[test]
    fn label_colors_match_palette() {
        let spec = ToySceneSpec { color_jitter: 0, pixel_noise: 0, ..ToySceneSpec::with_resolution(32) };
        for s in make_toy_corpus(&spec, 20, 3).unwrap() {
            for y in 0..32 {
                for x in 0..32 {
                    let c = s.labels.get(y, x);
                    assert_eq!(s.image.pixel(y, x), spec.classes[c].color);
                }
            }
        }
    }

    #[test]
    fn sky_and_road_fractions_follow_bands() {
        let spec = ToySceneSpec::default();
        let table = spec.remap_table().unwrap();
        let corpus = make_toy_corpus(&spec, 300, 4).unwrap();
        let mut mean = [0.0; 8];
        for s in &corpus {
            let st = class_statistics(&remap(&s.labels, &table).unwrap());
            for (m, v) in mean.iter_mut().zip(st) {
                *m += v / corpus.len() as f64;
            }
        }
        // sky can only lose pixels to occluders; road is whatever lies below the sidewalk
        assert!(mean[0] <= spec.horizon.max && mean[0] >= spec.horizon.min - 0.15, "sky {}", mean[0]);
        let road_max = 1.0 - spec.horizon.min - spec.sidewalk_height.min;
        assert!(mean[1] <= road_max && mean[1] >= 1.0 - spec.horizon.max - spec.sidewalk_height.max - 0.1, "road {}", mean[1]);
        assert!(mean.iter().all(|&m| m >= 0.01), "{mean:?}");
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = ToySceneSpec::default();
        spec.classes.retain(|c| c.family != ShapeFamily::Pole);
        assert!(make_toy_corpus(&spec, 1, 0).is_err());
        let spec = ToySceneSpec { horizon: span(0.6, 0.4), ..ToySceneSpec::default() };
        assert!(spec.validate().is_err());
    }
}
