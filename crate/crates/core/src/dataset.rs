//! Synthetic referring-segmentation corpus: colored shapes on a noisy
//! background, each annotated with a templated instruction whose predicate
//! picks out exactly one instance.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mask, Region};
use crate::policy::Vocabulary;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether pixel `(y, x)` of an `s × s` box lies inside the shape.
    fn covers(self, y: usize, x: usize, s: usize) -> bool {
        let (py, px, s) = (y as f64 + 0.5, x as f64 + 0.5, s as f64);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (py - r).powi(2) + (px - r).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at the top centre, base along the bottom edge
                (px - s / 2.0).abs() <= py / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::Purple => [160, 60, 200],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateClass {
    Attribute,
    Spatial,
    Superlative,
}

impl TemplateClass {
    pub const ALL: [TemplateClass; 3] = [TemplateClass::Attribute, TemplateClass::Spatial, TemplateClass::Superlative];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Centroid comparison `a REL b`, centroids given as `(y, x)`.
    pub fn holds(self, a: (f64, f64), b: (f64, f64)) -> bool {
        match self {
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    Largest,
    Smallest,
}

/// Attribute filter; `None` fields match anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub color: Option<Color>,
    pub shape: Option<ShapeKind>,
}

impl Descriptor {
    pub fn matches(&self, inst: &Instance) -> bool {
        self.color.is_none_or(|c| c == inst.color) && self.shape.is_none_or(|s| s == inst.shape)
    }

    /// Words after the article, e.g. `red square`, `red shape`, `square`.
    pub fn words(&self) -> String {
        let noun = self.shape.map_or("shape", ShapeKind::word);
        match self.color {
            Some(c) => format!("{} {noun}", c.word()),
            None => noun.to_string(),
        }
    }

    fn all(with_empty: bool) -> Vec<Descriptor> {
        let mut out = Vec::new();
        for c in Color::ALL {
            for s in ShapeKind::ALL {
                out.push(Descriptor { color: Some(c), shape: Some(s) });
            }
            out.push(Descriptor { color: Some(c), shape: None });
        }
        for s in ShapeKind::ALL {
            out.push(Descriptor { color: None, shape: Some(s) });
        }
        if with_empty {
            out.push(Descriptor { color: None, shape: None });
        }
        out
    }
}

/// Machine-readable meaning of an instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Attribute { desc: Descriptor },
    Spatial { desc: Descriptor, relation: Relation, anchor: Descriptor },
    Superlative { extreme: Extreme, desc: Descriptor },
}

impl Predicate {
    pub fn class(&self) -> TemplateClass {
        match self {
            Predicate::Attribute { .. } => TemplateClass::Attribute,
            Predicate::Spatial { .. } => TemplateClass::Spatial,
            Predicate::Superlative { .. } => TemplateClass::Superlative,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Predicate::Attribute { desc } => format!("the {}", desc.words()),
            Predicate::Spatial { desc, relation, anchor } => {
                format!("the {} {} the {}", desc.words(), relation.words(), anchor.words())
            }
            Predicate::Superlative { extreme, desc } => {
                let e = match extreme {
                    Extreme::Largest => "largest",
                    Extreme::Smallest => "smallest",
                };
                format!("the {e} {}", desc.words())
            }
        }
    }

    /// Instance ids satisfying the predicate. A referent is valid only when
    /// exactly one id comes back.
    pub fn referents(&self, instances: &[Instance]) -> Vec<usize> {
        match self {
            Predicate::Attribute { desc } => instances.iter().filter(|i| desc.matches(i)).map(|i| i.id).collect(),
            Predicate::Spatial { desc, relation, anchor } => {
                let anchors: Vec<&Instance> = instances.iter().filter(|i| anchor.matches(i)).collect();
                let [a] = anchors.as_slice() else { return Vec::new() };
                let ca = a.centroid();
                instances
                    .iter()
                    .filter(|i| i.id != a.id && desc.matches(i) && relation.holds(i.centroid(), ca))
                    .map(|i| i.id)
                    .collect()
            }
            Predicate::Superlative { extreme, desc } => {
                let cands: Vec<&Instance> = instances.iter().filter(|i| desc.matches(i)).collect();
                let key = |i: &Instance| match extreme {
                    Extreme::Largest => i.area() as i64,
                    Extreme::Smallest => -(i.area() as i64),
                };
                let Some(best) = cands.iter().map(|i| key(i)).max() else { return Vec::new() };
                cands.iter().filter(|i| key(i) == best).map(|i| i.id).collect()
            }
        }
    }

    /// Whether the predicate needs more than attribute matching to resolve:
    /// its descriptor alone must be ambiguous.
    fn is_compositional(&self, instances: &[Instance]) -> bool {
        match self {
            Predicate::Attribute { .. } => true,
            Predicate::Spatial { desc, .. } | Predicate::Superlative { desc, .. } => {
                instances.iter().filter(|i| desc.matches(i)).count() >= 2
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub shape: ShapeKind,
    pub color: Color,
    pub bbox: Region,
    /// Visible pixels at image resolution after occlusion.
    pub mask: Mask,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.count()
    }

    /// Mean `(y, x)` of visible pixel centres.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if self.mask.get(y, x) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        (sy / n, sx / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateMix {
    pub attribute: f64,
    pub spatial: f64,
    pub superlative: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        Self { attribute: 0.4, spatial: 0.3, superlative: 0.3 }
    }
}

impl TemplateMix {
    fn weight(&self, c: TemplateClass) -> f64 {
        match c {
            TemplateClass::Attribute => self.attribute,
            TemplateClass::Spatial => self.spatial,
            TemplateClass::Superlative => self.superlative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shape box side as a fraction of the shorter image side.
    pub min_shape_frac: f64,
    pub max_shape_frac: f64,
    pub min_visible: usize,
    /// Minimum visible fraction of each instance after occlusion.
    pub min_visible_frac: f64,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
    pub templates: TemplateMix,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 1000,
            min_side: 40,
            max_side: 80,
            min_instances: 2,
            max_instances: 6,
            min_shape_frac: 0.2,
            max_shape_frac: 0.45,
            min_visible: 16,
            min_visible_frac: 0.5,
            shapes: ShapeKind::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            templates: TemplateMix::default(),
            val_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    /// 1000 scenes with attribute-only instructions.
    pub fn toy() -> Self {
        Self { templates: TemplateMix { attribute: 1.0, spatial: 0.0, superlative: 0.0 }, ..Self::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DatasetConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("shape and color palettes must be nonempty");
        }
        if self.min_side < 8 || self.min_side > self.max_side {
            return bad("image side range must satisfy 8 <= min_side <= max_side");
        }
        if self.min_instances < 1 || self.min_instances > self.max_instances {
            return bad("instance count range must satisfy 1 <= min <= max");
        }
        if !(0.0 < self.min_shape_frac && self.min_shape_frac <= self.max_shape_frac && self.max_shape_frac <= 1.0) {
            return bad("shape fractions must satisfy 0 < min <= max <= 1");
        }
        let smallest = (self.min_shape_frac * self.min_side as f64).floor() as usize;
        if smallest * smallest < self.min_visible.max(1) {
            return bad("smallest shape cannot reach the visible-pixel minimum");
        }
        if !(0.0..=1.0).contains(&self.min_visible_frac) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("fractions must lie in [0, 1)");
        }
        let t = &self.templates;
        if [t.attribute, t.spatial, t.superlative].iter().any(|w| !w.is_finite() || *w < 0.0)
            || t.attribute + t.spatial + t.superlative <= 0.0
        {
            return bad("template weights must be nonnegative with a positive sum");
        }
        Ok(())
    }

    /// Seed of one scene, derived so scenes can be generated independently.
    pub fn scene_seed(&self, scene_id: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (scene_id as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
    }
}

const MAX_PLACEMENT_TRIES: usize = 200;

/// Draws one scene. Deterministic in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &DatasetConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(cfg.min_side..=cfg.max_side);
    let w = rng.gen_range(cfg.min_side..=cfg.max_side);
    let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let short = h.min(w) as f64;
    let lo = ((cfg.min_shape_frac * short).floor() as usize).max(2);
    let hi = ((cfg.max_shape_frac * short).floor() as usize).max(lo);
    // full masks and attributes, drawn back to front
    let mut placed: Vec<(ShapeKind, Color, Region, Mask)> = Vec::with_capacity(n);
    'outer: loop {
        placed.clear();
        for _ in 0..n {
            let mut ok = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let shape = *cfg.shapes.choose(&mut rng).expect("nonempty palette");
                let color = *cfg.colors.choose(&mut rng).expect("nonempty palette");
                let s = rng.gen_range(lo..=hi);
                let top = rng.gen_range(0..=h - s);
                let left = rng.gen_range(0..=w - s);
                let bbox = Region { top, left, height: s, width: s };
                let full = Mask::from_fn(h, w, |y, x| {
                    bbox.contains(y, x) && shape.covers(y - top, x - left, s)
                });
                placed.push((shape, color, bbox, full));
                if visible_masks(&placed).iter().zip(&placed).all(|(v, p)| {
                    let (vis, tot) = (v.count(), p.3.count());
                    vis >= cfg.min_visible && vis as f64 >= cfg.min_visible_frac * tot as f64
                }) {
                    ok = true;
                    break;
                }
                placed.pop();
            }
            if !ok {
                continue 'outer;
            }
        }
        break;
    }
    let visible = visible_masks(&placed);
    let mut image = RgbImage::new(w as u32, h as u32);
    for px in image.pixels_mut() {
        let base = rng.gen_range(15u8..=45);
        *px = Rgb([base, base + rng.gen_range(0..6), base + rng.gen_range(0..6)]);
    }
    for (shape_color, full) in placed.iter().map(|p| (p.1, &p.3)) {
        let rgb = shape_color.rgb();
        for y in 0..h {
            for x in 0..w {
                if full.get(y, x) {
                    let jitter = |c: u8, d: i16| (c as i16 + d).clamp(0, 255) as u8;
                    let d: i16 = rng.gen_range(-12..=12);
                    image.put_pixel(x as u32, y as u32, Rgb([jitter(rgb[0], d), jitter(rgb[1], d), jitter(rgb[2], d)]));
                }
            }
        }
    }
    let instances = placed
        .into_iter()
        .zip(visible)
        .enumerate()
        .map(|(id, ((shape, color, bbox, _), mask))| Instance { id, shape, color, bbox, mask })
        .collect();
    Ok(Scene { seed, image, instances })
}

/// Each mask minus everything drawn after it.
fn visible_masks(placed: &[(ShapeKind, Color, Region, Mask)]) -> Vec<Mask> {
    let Some(first) = placed.first() else { return Vec::new() };
    let (h, w) = first.3.size();
    let mut covered = Mask::zeros(h, w);
    let mut out = vec![Mask::zeros(h, w); placed.len()];
    for (k, p) in placed.iter().enumerate().rev() {
        out[k] = Mask::from_fn(h, w, |y, x| p.3.get(y, x) && !covered.get(y, x));
        for y in 0..h {
            for x in 0..w {
                if p.3.get(y, x) {
                    covered.set(y, x, true);
                }
            }
        }
    }
    out
}

/// All predicates of one class that resolve to exactly one instance.
pub fn valid_predicates(scene: &Scene, class: TemplateClass) -> Vec<(Predicate, usize)> {
    let inst = &scene.instances;
    let mut cands = Vec::new();
    match class {
        TemplateClass::Attribute => {
            for desc in Descriptor::all(false) {
                cands.push(Predicate::Attribute { desc });
            }
        }
        TemplateClass::Spatial => {
            for desc in Descriptor::all(false) {
                for relation in Relation::ALL {
                    for anchor in Descriptor::all(false) {
                        cands.push(Predicate::Spatial { desc, relation, anchor });
                    }
                }
            }
        }
        TemplateClass::Superlative => {
            for extreme in [Extreme::Largest, Extreme::Smallest] {
                for desc in Descriptor::all(true) {
                    cands.push(Predicate::Superlative { extreme, desc });
                }
            }
        }
    }
    cands
        .into_iter()
        .filter(|p| p.is_compositional(inst))
        .filter_map(|p| match p.referents(inst).as_slice() {
            [t] => Some((p.clone(), *t)),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub scene_id: usize,
    pub split: Split,
    pub instruction: String,
    pub tokens: Vec<usize>,
    pub target: usize,
    pub predicate: Predicate,
    pub image_path: String,
    pub mask_path: String,
}

/// Picks an instruction for `scene`, preferring `class` and falling back to
/// the other classes in fixed order. `None` when nothing is unique.
pub fn generate_instruction(
    scene: &Scene,
    scene_id: usize,
    class: TemplateClass,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<Option<Annotation>> {
    let order = std::iter::once(class).chain(TemplateClass::ALL.into_iter().filter(|&c| c != class));
    for c in order {
        let valid = valid_predicates(scene, c);
        if let Some((pred, target)) = valid.choose(rng) {
            let instruction = pred.text();
            let tokens = vocab.encode(&instruction)?;
            return Ok(Some(Annotation {
                scene_id,
                split: Split::Train,
                instruction,
                tokens,
                target: *target,
                predicate: pred.clone(),
                image_path: format!("images/{scene_id:06}.png"),
                mask_path: format!("masks/{scene_id:06}_{target}.png"),
            }));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
    /// One per scene that admitted a unique instruction, in scene order.
    pub annotations: Vec<Annotation>,
    /// Scenes without any unique instruction.
    pub skipped: usize,
}

/// Generates every scene and its annotation and assigns scene-level splits.
pub fn generate_corpus(cfg: &DatasetConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let mut ids: Vec<usize> = (0..cfg.scenes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5917));
    let n_val = (cfg.val_fraction * cfg.scenes as f64).round() as usize;
    let mut is_val = vec![false; cfg.scenes];
    for &i in &ids[..n_val] {
        is_val[i] = true;
    }
    let t = &cfg.templates;
    let total = t.attribute + t.spatial + t.superlative;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut annotations = Vec::with_capacity(cfg.scenes);
    let mut skipped = 0;
    for id in 0..cfg.scenes {
        let seed = cfg.scene_seed(id);
        let scene = generate_scene(seed, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11_0CA7E);
        let mut u = rng.gen_range(0.0..total);
        let mut class = TemplateClass::Superlative;
        for c in TemplateClass::ALL {
            if u < t.weight(c) {
                class = c;
                break;
            }
            u -= t.weight(c);
        }
        match generate_instruction(&scene, id, class, &vocab, &mut rng)? {
            Some(mut a) => {
                a.split = if is_val[id] { Split::Val } else { Split::Train };
                annotations.push(a);
            }
            None => {
                log::warn!("scene {id}: no uniquely referring instruction, skipped");
                skipped += 1;
            }
        }
        scenes.push(scene);
    }
    Ok(Corpus { config: cfg.clone(), scenes, annotations, skipped })
}

/// One annotated image ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub annotation: Annotation,
    pub image: RgbImage,
    /// Ground truth at the original image resolution.
    pub gt: Mask,
}

impl ImageSample {
    /// `[3,H,W]` with values in `[0,1]`.
    pub fn image_tensor(&self) -> Tensor {
        rgb_to_tensor(&self.image)
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

impl Corpus {
    /// In-memory samples, identical to what [`read_dataset`] returns after
    /// [`write_dataset`].
    pub fn samples(&self) -> Vec<ImageSample> {
        self.annotations
            .iter()
            .map(|a| {
                let scene = &self.scenes[a.scene_id];
                ImageSample {
                    annotation: a.clone(),
                    image: scene.image.clone(),
                    gt: scene.instances[a.target].mask.clone(),
                }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    scenes: usize,
    annotations: usize,
    skipped: usize,
    train: usize,
    val: usize,
}

fn mask_to_gray(m: &Mask) -> GrayImage {
    GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }]))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes images, target masks, `annotations.jsonl`, `vocab.json` and
/// `dataset.json` under `dir`.
pub fn write_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for a in &corpus.annotations {
        let scene = &corpus.scenes[a.scene_id];
        let ip = dir.join(&a.image_path);
        scene.image.save(&ip).map_err(|e| Error::image(&ip, e))?;
        let mp = dir.join(&a.mask_path);
        mask_to_gray(&scene.instances[a.target].mask).save(&mp).map_err(|e| Error::image(&mp, e))?;
    }
    let path = dir.join("annotations.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for a in &corpus.annotations {
        let line = serde_json::to_string(a).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    let vocab = Vocabulary::standard();
    let tokens: Vec<&str> = (0..vocab.len()).map(|i| vocab.token(i)).collect();
    write_file(&dir.join("vocab.json"), serde_json::to_string_pretty(&tokens).expect("serializable").as_bytes())?;
    let count = |s: Split| corpus.annotations.iter().filter(|a| a.split == s).count();
    let manifest = Manifest {
        config: corpus.config.clone(),
        scenes: corpus.scenes.len(),
        annotations: corpus.annotations.len(),
        skipped: corpus.skipped,
        train: count(Split::Train),
        val: count(Split::Val),
    };
    write_file(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest).expect("serializable").as_bytes())
}

#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<ImageSample>,
    /// Metadata lines that could not be parsed.
    pub skipped_records: usize,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> Vec<ImageSample> {
        self.samples.iter().filter(|s| s.annotation.split == split).cloned().collect()
    }
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.as_raw().iter().map(|&v| (v >= 128) as u8).collect())
}

/// Loads every annotation under `dir`. A directory without an annotations
/// file is an empty dataset. Unparseable lines are skipped and counted;
/// a referenced image or mask that does not exist is an error.
pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let path = dir.join("annotations.jsonl");
    if !path.exists() {
        return Ok(LoadedDataset::default());
    }
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = LoadedDataset::default();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = match serde_json::from_str(&line) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), lineno + 1);
                out.skipped_records += 1;
                continue;
            }
        };
        let ip: PathBuf = dir.join(&a.image_path);
        let image = image::open(&ip).map_err(|e| Error::image(&ip, e))?.to_rgb8();
        let gt = read_mask(&dir.join(&a.mask_path))?;
        if (gt.height(), gt.width()) != (image.height() as usize, image.width() as usize) {
            return Err(Error::InvalidInput(format!("mask {} does not match its image size", a.mask_path)));
        }
        out.samples.push(ImageSample { annotation: a, image, gt });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: usize, shape: ShapeKind, color: Color, top: usize, left: usize, s: usize) -> Instance {
        let bbox = Region { top, left, height: s, width: s };
        Instance { id, shape, color, bbox, mask: Mask::from_fn(40, 40, |y, x| bbox.contains(y, x)) }
    }

    #[test]
    fn shipped_toy_config_matches_constructor() {
        let cfg = DatasetConfig::from_toml_str(include_str!("../../../configs/toy_data.toml")).unwrap();
        assert_eq!(cfg.to_toml_string(), DatasetConfig::toy().to_toml_string());
    }

    fn scene_of(instances: Vec<Instance>) -> Scene {
        Scene { seed: 0, image: RgbImage::new(40, 40), instances }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = DatasetConfig::default();
        assert_eq!(generate_scene(0, &cfg).unwrap(), generate_scene(0, &cfg).unwrap());
        assert_ne!(generate_scene(0, &cfg).unwrap().image, generate_scene(1, &cfg).unwrap().image);
    }

    #[test]
    fn instance_count_range_is_honoured() {
        let cfg = DatasetConfig { min_instances: 2, max_instances: 2, ..Default::default() };
        for seed in 0..20 {
            assert_eq!(generate_scene(seed, &cfg).unwrap().instances.len(), 2);
        }
    }

    #[test]
    fn empty_palettes_are_rejected() {
        let cfg = DatasetConfig { colors: vec![], ..Default::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::InvalidConfig(_))));
        let cfg = DatasetConfig { shapes: vec![], ..Default::default() };
        assert!(matches!(generate_corpus(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn visible_masks_have_at_least_16_pixels() {
        let cfg = DatasetConfig { scenes: 1000, ..Default::default() };
        for id in 0..cfg.scenes {
            let s = generate_scene(cfg.scene_seed(id), &cfg).unwrap();
            let (h, w) = (s.image.height() as usize, s.image.width() as usize);
            assert!((cfg.min_side..=cfg.max_side).contains(&h) && (cfg.min_side..=cfg.max_side).contains(&w));
            for i in &s.instances {
                assert!(i.mask.count() >= 16, "scene {id} instance {}", i.id);
            }
            // visible masks never overlap
            for y in 0..h {
                for x in 0..w {
                    assert!(s.instances.iter().filter(|i| i.mask.get(y, x)).count() <= 1);
                }
            }
        }
    }

    #[test]
    fn attribute_example() {
        let s = scene_of(vec![
            inst(0, ShapeKind::Square, Color::Red, 0, 0, 8),
            inst(1, ShapeKind::Circle, Color::Blue, 20, 20, 8),
        ]);
        let p = Predicate::Attribute { desc: Descriptor { color: Some(Color::Red), shape: None } };
        assert_eq!(p.text(), "the red shape");
        assert_eq!(p.referents(&s.instances), vec![0]);
    }

    #[test]
    fn superlative_example() {
        // areas 30, 45, 60 from rectangles
        let mk = |id: usize, h: usize, w: usize, top: usize| {
            let bbox = Region { top, left: 0, height: h, width: w };
            Instance {
                id,
                shape: ShapeKind::Square,
                color: Color::Green,
                bbox,
                mask: Mask::from_fn(40, 40, |y, x| bbox.contains(y, x)),
            }
        };
        let s = scene_of(vec![mk(0, 5, 6, 0), mk(1, 5, 9, 10), mk(2, 6, 10, 20)]);
        let areas: Vec<usize> = s.instances.iter().map(Instance::area).collect();
        assert_eq!(areas, vec![30, 45, 60]);
        let p = Predicate::Superlative { extreme: Extreme::Largest, desc: Descriptor { color: None, shape: None } };
        assert_eq!(p.referents(&s.instances), vec![2]);
        assert_eq!(p.text(), "the largest shape");
    }

    /// Independent brute-force evaluation: walks every instance and compares
    /// centroids directly from pixel sums.
    fn oracle(p: &Predicate, inst: &[Instance]) -> Vec<usize> {
        let centroid = |m: &Mask| {
            let pts: Vec<(usize, usize)> =
                (0..m.height()).flat_map(|y| (0..m.width()).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x)).collect();
            let n = pts.len() as f64;
            (
                pts.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n,
                pts.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n,
            )
        };
        let fits = |d: &Descriptor, i: &Instance| {
            (d.color.is_none() || d.color == Some(i.color)) && (d.shape.is_none() || d.shape == Some(i.shape))
        };
        let mut out = Vec::new();
        for t in inst {
            let ok = match p {
                Predicate::Attribute { desc } => fits(desc, t),
                Predicate::Spatial { desc, relation, anchor } => {
                    let anchors: Vec<&Instance> = inst.iter().filter(|a| fits(anchor, a)).collect();
                    anchors.len() == 1 && anchors[0].id != t.id && fits(desc, t) && {
                        let (ct, ca) = (centroid(&t.mask), centroid(&anchors[0].mask));
                        match relation {
                            Relation::LeftOf => ct.1 < ca.1,
                            Relation::RightOf => ct.1 > ca.1,
                            Relation::Above => ct.0 < ca.0,
                            Relation::Below => ct.0 > ca.0,
                        }
                    }
                }
                Predicate::Superlative { extreme, desc } => {
                    fits(desc, t)
                        && inst.iter().filter(|o| fits(desc, o)).all(|o| match extreme {
                            Extreme::Largest => o.mask.count() <= t.mask.count(),
                            Extreme::Smallest => o.mask.count() >= t.mask.count(),
                        })
                }
            };
            if ok {
                out.push(t.id);
            }
        }
        out
    }

    #[test]
    fn emitted_annotations_refer_uniquely() {
        let cfg = DatasetConfig { scenes: 300, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut classes = std::collections::HashSet::new();
        for a in &corpus.annotations {
            let scene = &corpus.scenes[a.scene_id];
            assert_eq!(oracle(&a.predicate, &scene.instances), vec![a.target], "{}", a.instruction);
            assert_eq!(a.instruction, a.predicate.text());
            classes.insert(a.predicate.class());
        }
        assert_eq!(classes.len(), 3);
        assert_eq!(corpus.annotations.len() + corpus.skipped, 300);
    }

    #[test]
    fn spatial_predicates_match_centroid_oracle() {
        let cfg = DatasetConfig::default();
        for seed in 0..40 {
            let s = generate_scene(seed, &cfg).unwrap();
            for desc in Descriptor::all(false) {
                for relation in Relation::ALL {
                    for anchor in Descriptor::all(false) {
                        let p = Predicate::Spatial { desc, relation, anchor };
                        assert_eq!(p.referents(&s.instances), oracle(&p, &s.instances));
                    }
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_by_scene() {
        let cfg = DatasetConfig { scenes: 200, val_fraction: 0.25, ..Default::default() };
        let c = generate_corpus(&cfg).unwrap();
        let val: std::collections::HashSet<usize> =
            c.annotations.iter().filter(|a| a.split == Split::Val).map(|a| a.scene_id).collect();
        assert!(c.annotations.iter().filter(|a| a.split == Split::Train).all(|a| !val.contains(&a.scene_id)));
        assert!((40..=50).contains(&val.len()));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { scenes: 100, ..Default::default() };
        let c = generate_corpus(&cfg).unwrap();
        write_dataset(&c, dir.path()).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.skipped_records, 0);
        assert_eq!(loaded.samples, c.samples());
    }

    #[test]
    fn truncated_line_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { scenes: 100, min_instances: 2, max_instances: 3, ..Default::default() };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.annotations.len(), 100);
        write_dataset(&c, dir.path()).unwrap();
        let path = dir.path().join("annotations.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let cut = lines[37].len() / 2;
        lines[37].truncate(cut);
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 99);
        assert_eq!(loaded.skipped_records, 1);
    }

    #[test]
    fn empty_directory_and_missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert!(loaded.samples.is_empty());
        assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::MissingFile(_))));
        let c = generate_corpus(&DatasetConfig { scenes: 3, ..Default::default() }).unwrap();
        write_dataset(&c, dir.path()).unwrap();
        fs::remove_file(dir.path().join(&c.annotations[1].mask_path)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn corpus_is_deterministic() {
        let cfg = DatasetConfig { scenes: 20, ..Default::default() };
        let (a, b) = (generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.scenes, b.scenes);
    }
}
