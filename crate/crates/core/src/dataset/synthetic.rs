//! Glyph-grid images whose classes share "ingredients" with a sibling class.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    class_dir_name, ingredient_sentence, quantize, split_checksum, Dataset, Manifest,
    ManifestClass, SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::textaug::standard_caption;

/// Category names, listed in sibling pairs of look-alike dishes.
const CLASS_NAMES: [&str; 20] = [
    "hot dog",
    "lobster roll",
    "sushi",
    "sashimi",
    "ramen",
    "pho",
    "tacos",
    "burrito",
    "pancakes",
    "waffles",
    "apple pie",
    "cheesecake",
    "dumplings",
    "spring rolls",
    "paella",
    "risotto",
    "nachos",
    "quesadilla",
    "donuts",
    "churros",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    HBar,
    VBar,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::HBar,
    Shape::VBar,
];

/// Named palette entries, RGB in `[0, 1]`.
pub const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.90, 0.10, 0.10]),
    ("orange", [1.00, 0.55, 0.00]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("teal", [0.00, 0.70, 0.70]),
    ("blue", [0.15, 0.30, 0.95]),
    ("purple", [0.60, 0.20, 0.85]),
    ("pink", [1.00, 0.50, 0.75]),
    ("brown", [0.55, 0.33, 0.10]),
    ("white", [0.95, 0.95, 0.95]),
];

impl Shape {
    fn noun(self) -> &'static str {
        match self {
            Shape::Disc => "olive",
            Shape::Square => "cube",
            Shape::Triangle => "wedge",
            Shape::Diamond => "chip",
            Shape::Cross => "sprig",
            Shape::Ring => "ring",
            Shape::HBar => "noodle",
            Shape::VBar => "stick",
        }
    }

    /// Membership test in coordinates scaled by the glyph radius.
    fn contains(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => au <= 0.8 && av <= 0.8,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && au <= (v + 0.9) / 1.8,
            Shape::Diamond => au + av <= 1.0,
            Shape::Cross => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            Shape::Ring => (0.3025..=1.0).contains(&(u * u + v * v)),
            Shape::HBar => av <= 0.3 && au <= 1.0,
            Shape::VBar => au <= 0.3 && av <= 1.0,
        }
    }
}

/// A (shape, color) pair; the unit of sharing between classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlyphType {
    pub shape: Shape,
    pub color: usize,
}

impl GlyphType {
    pub fn name(self) -> String {
        format!("{} {}", COLORS[self.color].0, self.shape.noun())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub ingredients_per_class: usize,
    /// Fraction of ingredient types shared with the sibling class.
    pub shared_fraction: f64,
    /// Scales position, size and color noise per sample.
    pub jitter: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            ingredients_per_class: 6,
            shared_fraction: 0.6,
            jitter: 0.5,
            train_per_class: 200,
            test_per_class: 40,
            image_size: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// `⌊ρ · ingredients⌋`, robust to the float product landing just below an integer.
    pub fn shared_count(&self) -> usize {
        (self.shared_fraction * self.ingredients_per_class as f64 + 1e-9).floor() as usize
    }

    fn grid(&self) -> usize {
        (self.image_size / 8).clamp(1, 8)
    }

    /// Sibling pairs, plus a lone class when the count is odd.
    fn groups(&self) -> usize {
        self.n_classes.div_ceil(2)
    }

    /// Colors owned by group `g`; groups never share a color.
    fn palette(&self, g: usize) -> impl Iterator<Item = usize> {
        let groups = self.groups();
        (0..COLORS.len()).filter(move |c| c % groups == g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation("a synthetic dataset needs at least 2 classes"));
        }
        if self.ingredients_per_class == 0 {
            return Err(Error::validation("ingredients_per_class must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::validation(format!(
                "shared_fraction {} would share more ingredients than a class has",
                self.shared_fraction
            )));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::validation("jitter must be finite and non-negative"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::validation("every split needs at least one sample per class"));
        }
        if self.image_size < 8 {
            return Err(Error::validation("image_size must be at least 8"));
        }
        if self.n_classes > CLASS_NAMES.len() {
            return Err(Error::validation(format!(
                "at most {} synthetic classes are available",
                CLASS_NAMES.len()
            )));
        }
        let cells = self.grid() * self.grid();
        if self.ingredients_per_class + 1 > cells {
            return Err(Error::validation(format!(
                "{} glyphs do not fit on a {}-cell grid",
                self.ingredients_per_class + 1,
                cells
            )));
        }
        if self.groups() > COLORS.len() {
            return Err(Error::validation(format!(
                "{} classes need more than the {} available colors",
                self.n_classes,
                COLORS.len()
            )));
        }
        // A pair needs 2n ingredient types plus two markers from its palette.
        let per_pair = 2 * self.ingredients_per_class + 2;
        for g in 0..self.groups() {
            let available = SHAPES.len() * self.palette(g).count();
            if per_pair > available {
                return Err(Error::validation(format!(
                    "a sibling pair needs {per_pair} glyph types but its palette offers {available}"
                )));
            }
        }
        Ok(())
    }
}

/// Ingredient inventory of one class; the marker is unique to the class.
#[derive(Debug, Clone)]
struct ClassPlan {
    name: &'static str,
    ingredients: Vec<GlyphType>,
    marker: GlyphType,
    sibling: Option<usize>,
}

fn plan_classes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<ClassPlan> {
    let n = spec.ingredients_per_class;
    let s = spec.shared_count();
    let k = spec.n_classes;
    let groups = spec.groups();
    let mut plans = Vec::with_capacity(k);
    for g in 0..groups {
        let mut pool: Vec<GlyphType> = SHAPES
            .iter()
            .flat_map(|&shape| spec.palette(g).map(move |color| GlyphType { shape, color }))
            .collect();
        pool.shuffle(rng);
        let a = 2 * g;
        if a + 1 < k {
            // Every pair draws 2n types whatever ρ is, so under one seed the
            // only difference between ρ values is the overlap inside the pair.
            let first = pool[..n].to_vec();
            let mut second = first[..s].to_vec();
            second.extend_from_slice(&pool[n + s..2 * n]);
            plans.push(ClassPlan {
                name: CLASS_NAMES[a],
                ingredients: first,
                marker: pool[2 * n],
                sibling: Some(a + 1),
            });
            plans.push(ClassPlan {
                name: CLASS_NAMES[a + 1],
                ingredients: second,
                marker: pool[2 * n + 1],
                sibling: Some(a),
            });
        } else {
            plans.push(ClassPlan {
                name: CLASS_NAMES[a],
                ingredients: pool[..n].to_vec(),
                marker: pool[n],
                sibling: None,
            });
        }
    }
    plans
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn render(plan: &ClassPlan, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let size = spec.image_size;
    let sigma = spec.jitter as f32;
    let grid = spec.grid();
    let cell = size as f32 / grid as f32;

    let bg: Vec<f32> = (0..3).map(|_| 0.08 + 0.04 * sigma * normal(rng)).collect();
    let mut img = Array3::<f32>::zeros((size, size, 3));
    for ((_, _, c), v) in img.indexed_iter_mut() {
        *v = bg[c] + 0.02 * sigma * normal(rng);
    }

    let keep = (1.0 - 0.2 * sigma).max(0.5);
    let mut glyphs = vec![plan.marker];
    glyphs.extend(plan.ingredients.iter().copied().filter(|_| rng.random::<f32>() < keep));
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);

    for (glyph, &cell_idx) in glyphs.iter().zip(&cells) {
        let (gy, gx) = (cell_idx / grid, cell_idx % grid);
        let wobble = 0.12 * sigma * cell;
        let cx = (gx as f32 + 0.5) * cell + (wobble * normal(rng)).clamp(-0.25 * cell, 0.25 * cell);
        let cy = (gy as f32 + 0.5) * cell + (wobble * normal(rng)).clamp(-0.25 * cell, 0.25 * cell);
        let r = 0.38 * cell * (1.0 + 0.15 * sigma * normal(rng)).clamp(0.6, 1.3);
        let base = COLORS[glyph.color].1;
        let color: Vec<f32> = base.iter().map(|&b| b + 0.1 * sigma * normal(rng)).collect();

        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(size);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f32 + 0.5 - cx) / r;
                let v = (y as f32 + 0.5 - cy) / r;
                if glyph.shape.contains(u, v) {
                    for c in 0..3 {
                        img[[y, x, c]] = color[c];
                    }
                }
            }
        }
    }
    quantize(img.view())
}

/// Generates both splits; identical specs give byte-identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans = plan_classes(spec, &mut rng);

    // label ids follow sorted directory names, as when loading from disk
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by_key(|&i| class_dir_name(plans[i].name));
    let mut label_of = vec![0; plans.len()];
    for (label, &i) in order.iter().enumerate() {
        label_of[i] = label;
    }

    let ingredient_names = |p: &ClassPlan| -> Vec<String> {
        p.ingredients
            .iter()
            .chain(std::iter::once(&p.marker))
            .map(|g| g.name())
            .collect()
    };

    let mut splits: BTreeMap<Split, Vec<SampleRecord>> = BTreeMap::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        let mut records = Vec::with_capacity(per_class * plans.len());
        for &i in &order {
            let plan = &plans[i];
            let caption = format!(
                "{} {}",
                standard_caption(plan.name),
                ingredient_sentence(&ingredient_names(plan))
            );
            for _ in 0..per_class {
                records.push(SampleRecord {
                    image: render(plan, spec, &mut rng),
                    caption: caption.clone(),
                    label_id: label_of[i],
                    split,
                });
            }
        }
        splits.insert(split, records);
    }
    let train = splits.remove(&Split::Train).unwrap_or_default();
    let test = splits.remove(&Split::Test).unwrap_or_default();

    let classes: Vec<String> = order.iter().map(|&i| plans[i].name.to_string()).collect();
    let manifest = Manifest {
        classes: order
            .iter()
            .map(|&i| ManifestClass {
                name: plans[i].name.to_string(),
                dir: class_dir_name(plans[i].name),
                label_id: label_of[i],
                train_count: spec.train_per_class,
                test_count: spec.test_per_class,
                ingredients: ingredient_names(&plans[i]),
                sibling: plans[i].sibling.map(|j| plans[j].name.to_string()),
            })
            .collect(),
        spec: Some(spec.clone()),
        seed: spec.seed,
        checksums: [
            ("train".to_string(), split_checksum(&train)),
            ("test".to_string(), split_checksum(&test)),
        ]
        .into(),
    };
    Ok(Dataset {
        classes,
        train,
        test,
        image_size: spec.image_size,
        manifest,
        skipped: 0,
    })
}
