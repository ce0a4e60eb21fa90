//! Procedural HU phantoms.
//!
//! Shapes are laid out in normalized coordinates where `(±1, ±1)` are the grid
//! corners, painted in order with 3x3 supersampled coverage, and followed by
//! hard-edged metal inserts. Anatomy and metal draw from separate RNG streams so
//! forcing the metal count never changes the anatomy of a seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

pub const MIN_PHANTOM_SIZE: usize = 32;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomProfile {
    TorsoLike,
    DentalLike,
}

/// Shape family of metal inserts; the two data domains use different families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetalFamily {
    /// Small round inserts (screw heads, fillings).
    Discs,
    /// Elongated inserts (rods, posts), denser on average.
    Rods,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Material {
    Air = 0,
    Soft = 1,
    Bone = 2,
    Metal = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, a: r, b: r, angle: 0.0 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, k: f64) -> Self {
        Self { a: self.a * k, b: self.b * k, ..*self }
    }
}

/// One metal insert as placed by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetalInsert {
    pub shape: Ellipse,
    pub hu: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomOptions {
    pub profile: PhantomProfile,
    pub size: usize,
    /// Forces the number of metal inserts; drawn from the profile's range when `None`.
    pub metal_count: Option<usize>,
    pub metal_family: MetalFamily,
}

impl PhantomOptions {
    pub fn new(profile: PhantomProfile, size: usize) -> Self {
        Self {
            profile,
            size,
            metal_count: None,
            metal_family: MetalFamily::Discs,
        }
    }

    pub fn with_metal_count(mut self, n: usize) -> Self {
        self.metal_count = Some(n);
        self
    }

    pub fn with_family(mut self, family: MetalFamily) -> Self {
        self.metal_family = family;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// HU including metal inserts.
    pub hu_image: Array2<f64>,
    /// HU of the same anatomy without metal.
    pub tissue_hu: Array2<f64>,
    pub metal_mask: Array2<bool>,
    /// Body region excluding metal.
    pub roi_mask: Array2<bool>,
    pub material_map: Array2<Material>,
    pub inserts: Vec<MetalInsert>,
    pub profile: PhantomProfile,
}

impl Phantom {
    pub fn size(&self) -> usize {
        self.hu_image.nrows()
    }

    pub fn metal_pixels(&self) -> usize {
        self.metal_mask.iter().filter(|&&m| m).count()
    }

    /// The same anatomy with every metal insert removed.
    pub fn without_metal(&self) -> Phantom {
        let body = &self.roi_mask | &self.metal_mask;
        let material_map = material_from_tissue(&self.tissue_hu, &self.material_map, &self.metal_mask);
        Phantom {
            hu_image: self.tissue_hu.clone(),
            tissue_hu: self.tissue_hu.clone(),
            metal_mask: Array2::from_elem(self.metal_mask.dim(), false),
            roi_mask: body,
            material_map,
            inserts: Vec::new(),
            profile: self.profile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.hu_image.dim();
        if dim.0 != dim.1
            || self.tissue_hu.dim() != dim
            || self.metal_mask.dim() != dim
            || self.roi_mask.dim() != dim
            || self.material_map.dim() != dim
        {
            return invalid("phantom grids must be square and share one shape");
        }
        if self.hu_image.iter().any(|&v| !(v >= -1024.0) || !v.is_finite()) {
            return invalid("phantom HU values must be finite and at least -1024");
        }
        for ((&m, &r), &mat) in self.metal_mask.iter().zip(&self.roi_mask).zip(&self.material_map) {
            if m && mat != Material::Metal {
                return invalid("metal mask must be labelled metal in the material map");
            }
            if m && r {
                return invalid("roi must exclude metal");
            }
        }
        Ok(())
    }
}

fn material_from_tissue(tissue: &Array2<f64>, current: &Array2<Material>, metal: &Array2<bool>) -> Array2<Material> {
    Array2::from_shape_fn(tissue.dim(), |ix| {
        if metal[ix] {
            classify_hu(tissue[ix])
        } else {
            current[ix]
        }
    })
}

fn classify_hu(hu: f64) -> Material {
    if hu < -500.0 {
        Material::Air
    } else if hu >= 250.0 {
        Material::Bone
    } else {
        Material::Soft
    }
}

/// Painter with per-pixel coverage, used for the anatomical layers.
struct Canvas {
    size: usize,
    hu: Array2<f64>,
    bone: Array2<f64>,
}

impl Canvas {
    fn new(size: usize, background: f64) -> Self {
        Self {
            size,
            hu: Array2::from_elem((size, size), background),
            bone: Array2::zeros((size, size)),
        }
    }

    fn coord(&self, i: f64) -> f64 {
        (2.0 * i + 1.0) / self.size as f64 - 1.0
    }

    fn coverage(&self, e: &Ellipse, r: usize, c: usize) -> f64 {
        let mut hits = 0;
        for sr in 0..SUPERSAMPLE {
            for sc in 0..SUPERSAMPLE {
                let y = self.coord(r as f64 + (sr as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5);
                let x = self.coord(c as f64 + (sc as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5);
                if e.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    fn paint(&mut self, e: &Ellipse, hu: f64, is_bone: bool) {
        let target = if is_bone { 1.0 } else { 0.0 };
        for r in 0..self.size {
            for c in 0..self.size {
                let f = self.coverage(e, r, c);
                if f > 0.0 {
                    self.hu[[r, c]] = self.hu[[r, c]] * (1.0 - f) + hu * f;
                    self.bone[[r, c]] = self.bone[[r, c]] * (1.0 - f) + target * f;
                }
            }
        }
    }

    fn inside(&self, e: &Ellipse) -> Array2<bool> {
        Array2::from_shape_fn((self.size, self.size), |(r, c)| e.contains(self.coord(c as f64), self.coord(r as f64)))
    }
}

pub fn make_phantom(seed: u64, profile: PhantomProfile, size: usize) -> Result<Phantom> {
    make_phantom_with(seed, &PhantomOptions::new(profile, size))
}

pub fn make_phantom_with(seed: u64, opts: &PhantomOptions) -> Result<Phantom> {
    if opts.size < MIN_PHANTOM_SIZE {
        return invalid(format!("phantom size must be at least {MIN_PHANTOM_SIZE}, got {}", opts.size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metal_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7461_6c5f_7273);

    let (canvas, body, anchors) = match opts.profile {
        PhantomProfile::TorsoLike => torso(&mut rng, opts.size),
        PhantomProfile::DentalLike => dental(&mut rng, opts.size),
    };

    let tissue_hu = canvas.hu.clone();
    let body_mask = canvas.inside(&body);
    let mut material_map = Array2::from_shape_fn(tissue_hu.dim(), |ix| {
        let hu = tissue_hu[ix];
        if canvas.bone[ix] > 0.5 && hu >= 150.0 {
            Material::Bone
        } else if hu < -500.0 {
            Material::Air
        } else {
            Material::Soft
        }
    });

    let range = match opts.profile {
        PhantomProfile::TorsoLike => 0..=4,
        PhantomProfile::DentalLike => 1..=4,
    };
    let count = opts.metal_count.unwrap_or_else(|| metal_rng.random_range(range));

    let mut hu_image = tissue_hu.clone();
    let mut metal_mask = Array2::from_elem(tissue_hu.dim(), false);
    let mut inserts = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[metal_rng.random_range(0..anchors.len())];
        let shape = metal_shape(&mut metal_rng, opts.metal_family, opts.profile, anchor);
        let hu = match opts.metal_family {
            MetalFamily::Discs => metal_rng.random_range(9000.0..16000.0),
            MetalFamily::Rods => metal_rng.random_range(14000.0..26000.0),
        };
        let mut inside = canvas.inside(&shape);
        inside &= &body_mask;
        if !inside.iter().any(|&m| m) {
            // Sub-pixel insert: keep the pixel under its centre.
            let to_px = |v: f64| (((v + 1.0) * opts.size as f64 / 2.0).floor() as usize).min(opts.size - 1);
            inside[[to_px(shape.cy), to_px(shape.cx)]] = true;
        }
        let pixel_count = inside.iter().filter(|&&m| m).count();
        ndarray::Zip::from(&mut hu_image)
            .and(&mut metal_mask)
            .and(&inside)
            .for_each(|h, m, &i| {
                if i {
                    *h = hu;
                    *m = true;
                }
            });
        inserts.push(MetalInsert { shape, hu, pixel_count });
    }
    ndarray::Zip::from(&mut material_map).and(&metal_mask).for_each(|mat, &m| {
        if m {
            *mat = Material::Metal;
        }
    });
    let roi_mask = Array2::from_shape_fn(tissue_hu.dim(), |ix| body_mask[ix] && !metal_mask[ix]);

    let phantom = Phantom {
        hu_image,
        tissue_hu,
        metal_mask,
        roi_mask,
        material_map,
        inserts,
        profile: opts.profile,
    };
    phantom.validate()?;
    Ok(phantom)
}

fn metal_shape(rng: &mut ChaCha8Rng, family: MetalFamily, profile: PhantomProfile, anchor: (f64, f64)) -> Ellipse {
    let jitter = match profile {
        PhantomProfile::TorsoLike => 0.06,
        PhantomProfile::DentalLike => 0.015,
    };
    let cx = anchor.0 + rng.random_range(-jitter..jitter);
    let cy = anchor.1 + rng.random_range(-jitter..jitter);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    match (family, profile) {
        (MetalFamily::Discs, PhantomProfile::TorsoLike) => Ellipse::circle(cx, cy, rng.random_range(0.03..0.055)),
        (MetalFamily::Discs, PhantomProfile::DentalLike) => Ellipse::circle(cx, cy, rng.random_range(0.025..0.04)),
        (MetalFamily::Rods, PhantomProfile::TorsoLike) => Ellipse {
            cx,
            cy,
            a: rng.random_range(0.08..0.15),
            b: rng.random_range(0.025..0.04),
            angle,
        },
        (MetalFamily::Rods, PhantomProfile::DentalLike) => Ellipse {
            cx,
            cy,
            a: rng.random_range(0.05..0.08),
            b: rng.random_range(0.02..0.03),
            angle,
        },
    }
}

type Layout = (Canvas, Ellipse, Vec<(f64, f64)>);

fn torso(rng: &mut ChaCha8Rng, size: usize) -> Layout {
    let mut canvas = Canvas::new(size, -1000.0);
    let body = Ellipse {
        cx: rng.random_range(-0.03..0.03),
        cy: rng.random_range(-0.03..0.03),
        a: rng.random_range(0.80..0.90),
        b: rng.random_range(0.56..0.68),
        angle: rng.random_range(-0.05..0.05),
    };
    canvas.paint(&body, rng.random_range(-110.0..-70.0), false);
    let inner = body.scaled(rng.random_range(0.86..0.92));
    canvas.paint(&inner, rng.random_range(30.0..55.0), false);

    for _ in 0..rng.random_range(2..=4) {
        let organ = Ellipse {
            cx: inner.cx + rng.random_range(-0.5..0.5) * inner.a,
            cy: inner.cy + rng.random_range(-0.45..0.2) * inner.b,
            a: rng.random_range(0.10..0.28),
            b: rng.random_range(0.08..0.20),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        canvas.paint(&organ, rng.random_range(10.0..90.0), false);
    }
    for _ in 0..rng.random_range(0..=2) {
        let gas = Ellipse::circle(
            inner.cx + rng.random_range(-0.4..0.4) * inner.a,
            inner.cy + rng.random_range(-0.4..0.1) * inner.b,
            rng.random_range(0.03..0.07),
        );
        canvas.paint(&gas, rng.random_range(-950.0..-800.0), false);
    }

    // Vertebra: cortical shell, cancellous core, spinous process.
    let spine_y = inner.cy + 0.55 * inner.b;
    let vertebra = Ellipse {
        cx: inner.cx + rng.random_range(-0.02..0.02),
        cy: spine_y,
        a: rng.random_range(0.09..0.12),
        b: rng.random_range(0.08..0.10),
        angle: 0.0,
    };
    canvas.paint(&vertebra, rng.random_range(1000.0..1300.0), true);
    canvas.paint(&vertebra.scaled(0.75), rng.random_range(250.0..450.0), true);
    let process = Ellipse {
        cx: vertebra.cx,
        cy: vertebra.cy + vertebra.b + 0.05,
        a: 0.03,
        b: 0.06,
        angle: 0.0,
    };
    canvas.paint(&process, rng.random_range(800.0..1100.0), true);

    // Paired lateral bones (pelvis/ribs).
    let lateral_x = rng.random_range(0.50..0.62) * inner.a;
    let lateral_y = inner.cy + rng.random_range(-0.1..0.25) * inner.b;
    let (la, lb, tilt) = (rng.random_range(0.07..0.13), rng.random_range(0.05..0.09), rng.random_range(0.0..0.6));
    let hu = rng.random_range(800.0..1400.0);
    let mut anchors = vec![(vertebra.cx, vertebra.cy)];
    for side in [-1.0, 1.0] {
        let bone = Ellipse {
            cx: inner.cx + side * lateral_x,
            cy: lateral_y,
            a: la,
            b: lb,
            angle: side * tilt,
        };
        canvas.paint(&bone, hu, true);
        anchors.push((bone.cx, bone.cy));
    }
    (canvas, body, anchors)
}

fn dental(rng: &mut ChaCha8Rng, size: usize) -> Layout {
    let mut canvas = Canvas::new(size, -1000.0);
    let head = Ellipse {
        cx: rng.random_range(-0.02..0.02),
        cy: rng.random_range(-0.02..0.02),
        a: rng.random_range(0.62..0.72),
        b: rng.random_range(0.68..0.80),
        angle: rng.random_range(-0.05..0.05),
    };
    canvas.paint(&head, rng.random_range(20.0..50.0), false);

    let tongue = Ellipse {
        cx: head.cx,
        cy: head.cy + 0.05,
        a: rng.random_range(0.18..0.26),
        b: rng.random_range(0.14..0.20),
        angle: 0.0,
    };
    canvas.paint(&tongue, rng.random_range(50.0..80.0), false);
    let airway = Ellipse::circle(head.cx, head.cy + 0.45 * head.b, rng.random_range(0.05..0.09));
    canvas.paint(&airway, -900.0, false);

    // Jaw arc: v = v0 + k * u^2, opening towards the back of the head.
    let v0 = head.cy - rng.random_range(0.40..0.48) * head.b;
    let k = rng.random_range(1.6..2.2);
    let half_width = rng.random_range(0.32..0.40);
    let bone_hu = rng.random_range(1000.0..1400.0);
    let n_bone = 15;
    for i in 0..n_bone {
        let u = -half_width + 2.0 * half_width * i as f64 / (n_bone - 1) as f64;
        canvas.paint(&Ellipse::circle(head.cx + u, v0 + k * u * u, 0.075), bone_hu, true);
    }
    let n_teeth = rng.random_range(10..=14);
    let mut anchors = Vec::with_capacity(n_teeth);
    for i in 0..n_teeth {
        let u = -0.9 * half_width + 1.8 * half_width * i as f64 / (n_teeth - 1) as f64;
        let slope = 2.0 * k * u;
        let tooth = Ellipse {
            cx: head.cx + u,
            cy: v0 + k * u * u,
            a: 0.035,
            b: 0.05,
            angle: slope.atan(),
        };
        canvas.paint(&tooth, rng.random_range(1900.0..2600.0), true);
        anchors.push((tooth.cx, tooth.cy));
    }
    (canvas, head, anchors)
}
