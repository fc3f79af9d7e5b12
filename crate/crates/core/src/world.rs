//! Synthetic shapes world: deterministic scenes, a rasterizer and a fixed
//! caption grammar that supplies ground truth for every caption length.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const CANVAS: usize = 64;
pub const MAX_OBJECTS: usize = 6;
pub const MAX_CAPTION_LEN: usize = 8;
/// Maximum IoU allowed between any two object boxes.
pub const MAX_PAIR_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 1000;
const COORD_SCALE: f64 = 1e6;

pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::from_word(s).ok_or_else(|| Error::UnknownWord(s.to_string()))
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Star => "star",
    Diamond => "diamond",
    Cross => "cross",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    White => "white",
    Black => "black",
});

word_enum!(Size {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

word_enum!(Region {
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
    Center => "center",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 0.8, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Purple => [0.6, 0.0, 0.8],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

impl Size {
    /// Box side as a fraction of the canvas.
    pub fn side(self) -> f64 {
        match self {
            Size::Small => 0.15,
            Size::Medium => 0.25,
            Size::Large => 0.40,
        }
    }
}

/// Connective and attribute-form words that complete the grammar lexicon.
pub const FUNCTION_WORDS: &[&str] = &["at", "near", "the", "color", "size", "shape", "is"];

/// Every word the grammar can produce.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Size::ALL.iter().map(|s| s.word()));
    words.extend(Region::ALL.iter().map(|r| r.word()));
    words.extend_from_slice(FUNCTION_WORDS);
    words.sort_unstable();
    words.dedup();
    words
}

/// Normalized center-size box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// `[x0, y0, x1, y1]`
    pub fn to_corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        Self {
            cx: (c[0] + c[2]) / 2.0,
            cy: (c[1] + c[3]) / 2.0,
            w: c[2] - c[0],
            h: c[3] - c[1],
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.to_corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    pub fn inside_canvas(&self) -> bool {
        let [x0, y0, x1, y1] = self.to_corners();
        self.w > 0.0 && self.h > 0.0 && self.w <= 1.0 && self.h <= 1.0
            && x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Intersection over union in corner form. Areas also come from the
    /// corners so that a box scores exactly 1 against itself.
    pub fn iou(&self, other: &BBox) -> f64 {
        let a = self.to_corners();
        let b = other.to_corners();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
        let union = area(a) + area(b) - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cx: f64,
    pub cy: f64,
}

impl ObjectSpec {
    pub fn bbox(&self) -> BBox {
        let side = self.size.side();
        BBox::new(self.cx, self.cy, side, side)
    }

    pub fn region(&self) -> Region {
        region_word(self.cx, self.cy)
    }

    /// Pixel-membership test in normalized coordinates. No anti-aliasing.
    fn covers(&self, x: f64, y: f64) -> bool {
        let s = self.size.side() / 2.0;
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (ax, ay) = (dx.abs(), dy.abs());
        if ax > s || ay > s {
            return false;
        }
        match self.shape {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Diamond => ax + ay <= s,
            Shape::Cross => ay <= s / 3.0 || ax <= s / 3.0,
            Shape::Triangle => ax <= (dy + s) / 2.0,
            Shape::Star => (ax / s).sqrt() + (ay / s).sqrt() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of shapes drawn from [`Shape::ALL`].
    pub shapes: usize,
    /// Number of colors drawn from [`Color::ALL`].
    pub colors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: MAX_OBJECTS,
            shapes: Shape::ALL.len(),
            colors: Color::ALL.len(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS
        {
            return Err(Error::Config(format!(
                "object count range {}..={} must lie within 1..={MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        if self.shapes == 0 || self.shapes > Shape::ALL.len() {
            return Err(Error::Config(format!("shapes must be in 1..={}", Shape::ALL.len())));
        }
        if self.colors == 0 || self.colors > Color::ALL.len() {
            return Err(Error::Config(format!("colors must be in 1..={}", Color::ALL.len())));
        }
        Ok(())
    }
}

/// Maps a center to a coarse region word using strict inequalities.
pub fn region_word(cx: f64, cy: f64) -> Region {
    if cx < 1.0 / 3.0 {
        Region::Left
    } else if cx > 2.0 / 3.0 {
        Region::Right
    } else if cy < 1.0 / 3.0 {
        Region::Top
    } else if cy > 2.0 / 3.0 {
        Region::Bottom
    } else {
        Region::Center
    }
}

fn quantized_coord(rng: &mut ChaCha8Rng, half_side: f64) -> f64 {
    let lo = ((half_side) * COORD_SCALE).ceil() as u64;
    let hi = ((1.0 - half_side) * COORD_SCALE).floor() as u64;
    rng.random_range(lo..=hi) as f64 / COORD_SCALE
}

fn compatible(a: &ObjectSpec, b: &ObjectSpec) -> bool {
    let (ba, bb) = (a.bbox(), b.bbox());
    ba.iou(&bb) <= MAX_PAIR_IOU && !ba.contains_point(b.cx, b.cy) && !bb.contains_point(a.cx, a.cy)
}

/// Generates a scene by rejection sampling. Centers are quantized to 1e-6 so
/// that the 6-decimal serialization round-trips exactly.
pub fn generate_scene(seed: u64, config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = rng.random_range(config.min_objects..=config.max_objects);
    while count > 0 {
        if let Some(objects) = place_objects(&mut rng, count, config) {
            return Ok(Scene { seed, objects });
        }
        count -= 1;
    }
    Err(Error::Placement { seed })
}

fn place_objects(rng: &mut ChaCha8Rng, count: usize, config: &WorldConfig) -> Option<Vec<ObjectSpec>> {
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = Shape::ALL[rng.random_range(0..config.shapes)];
            let color = Color::ALL[rng.random_range(0..config.colors)];
            let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
            let half = size.side() / 2.0;
            let cx = quantized_coord(rng, half);
            let cy = quantized_coord(rng, half);
            let candidate = ObjectSpec { shape, color, size, cx, cy };
            if objects.iter().all(|o| compatible(o, &candidate)) {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// A 64x64 RGB raster, row-major `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Vec<f32>,
}

impl Image {
    pub const SIDE: usize = CANVAS;

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * CANVAS + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Paints objects in order over the background; later objects win.
pub fn render(scene: &Scene) -> Image {
    let mut data = Vec::with_capacity(CANVAS * CANVAS * 3);
    for py in 0..CANVAS {
        let y = (py as f64 + 0.5) / CANVAS as f64;
        for px in 0..CANVAS {
            let x = (px as f64 + 0.5) / CANVAS as f64;
            let rgb = scene
                .objects
                .iter()
                .rev()
                .find(|o| o.covers(x, y))
                .map(|o| o.color.rgb())
                .unwrap_or(BACKGROUND);
            data.extend_from_slice(&rgb);
        }
    }
    Image { data }
}

/// Index of the object whose center is nearest, ties to the lower index.
pub fn nearest_neighbor(scene: &Scene, index: usize) -> Option<usize> {
    let me = &scene.objects[index];
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in scene.objects.iter().enumerate() {
        if j == index {
            continue;
        }
        let d = (o.cx - me.cx).powi(2) + (o.cy - me.cy).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Color,
    Size,
    Shape,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Size, Attribute::Shape];

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Shape => "shape",
        }
    }

    pub fn value_of(self, object: &ObjectSpec) -> &'static str {
        match self {
            Attribute::Color => object.color.word(),
            Attribute::Size => object.size.word(),
            Attribute::Shape => object.shape.word(),
        }
    }

    /// The three prompt words that precede the attribute value.
    pub fn prompt_words(self) -> [&'static str; 3] {
        ["the", self.word(), "is"]
    }
}

/// Grammar caption for `object_index` with exactly `length` words.
///
/// Lengths 6..=8 refer to the nearest neighbor and are unavailable in
/// single-object scenes.
pub fn caption_for(scene: &Scene, object_index: usize, length: usize) -> Result<Vec<&'static str>> {
    let o = scene.objects.get(object_index).ok_or(Error::Unavailable {
        object: object_index,
        length,
    })?;
    let unavailable = Error::Unavailable {
        object: object_index,
        length,
    };
    let (shape, color, size, region) = (o.shape.word(), o.color.word(), o.size.word(), o.region().word());
    let neighbor = nearest_neighbor(scene, object_index).map(|j| &scene.objects[j]);
    let words = match length {
        1 => vec![shape],
        2 => vec![color, shape],
        3 => vec![size, color, shape],
        4 => vec![color, shape, "at", region],
        5 => vec![size, color, shape, "at", region],
        6 => {
            let n = neighbor.ok_or(unavailable)?;
            vec![size, color, shape, "near", "the", n.shape.word()]
        }
        7 => {
            let n = neighbor.ok_or(unavailable)?;
            vec![size, color, shape, "near", "the", n.color.word(), n.shape.word()]
        }
        8 => {
            let n = neighbor.ok_or(unavailable)?;
            vec![size, color, shape, "at", region, "near", "the", n.shape.word()]
        }
        _ => return Err(unavailable),
    };
    debug_assert_eq!(words.len(), length);
    Ok(words)
}

/// `the color is red` and friends; always four words.
pub fn attribute_caption(object: &ObjectSpec, attribute: Attribute) -> Vec<&'static str> {
    let [a, b, c] = attribute.prompt_words();
    vec![a, b, c, attribute.value_of(object)]
}

pub fn available_lengths(scene: &Scene) -> Vec<usize> {
    if scene.objects.len() > 1 {
        (1..=MAX_CAPTION_LEN).collect()
    } else {
        (1..=5).collect()
    }
}

/// Whole-image caption standing in for web alt-text: one grammar phrase per
/// object at a seeded random length, joined with " and ".
pub fn alt_text(scene: &Scene, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = available_lengths(scene);
    let phrases: Vec<String> = (0..scene.objects.len())
        .map(|i| {
            let k = lengths[rng.random_range(0..lengths.len())];
            caption_for(scene, i, k)
                .expect("length drawn from the available set")
                .join(" ")
        })
        .collect();
    phrases.join(" and ")
}

#[derive(Deserialize)]
struct ObjectRecord {
    shape: String,
    color: String,
    size: String,
    cx: f64,
    cy: f64,
}

#[derive(Deserialize)]
struct SceneRecord {
    seed: u64,
    objects: Vec<ObjectRecord>,
}

impl Scene {
    /// Fields after `{`, shared by the scene file and the shard format.
    pub(crate) fn json_fields(&self) -> String {
        let objects: Vec<String> = self
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{{\"shape\":\"{}\",\"color\":\"{}\",\"size\":\"{}\",\"cx\":{:.6},\"cy\":{:.6}}}",
                    o.shape, o.color, o.size, o.cx, o.cy
                )
            })
            .collect();
        format!("\"seed\":{},\"objects\":[{}]", self.seed, objects.join(","))
    }

    pub fn to_json_line(&self) -> String {
        format!("{{{}}}", self.json_fields())
    }

    pub fn from_json(line: &str) -> std::result::Result<Self, String> {
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Self::from_record(rec)
    }

    pub(crate) fn from_value(value: serde_json::Value) -> std::result::Result<Self, String> {
        let rec: SceneRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Self::from_record(rec)
    }

    fn from_record(rec: SceneRecord) -> std::result::Result<Self, String> {
        if rec.objects.is_empty() {
            return Err("scene has no objects".into());
        }
        let objects = rec
            .objects
            .into_iter()
            .map(|o| {
                Ok(ObjectSpec {
                    shape: o.shape.parse().map_err(|e: Error| e.to_string())?,
                    color: o.color.parse().map_err(|e: Error| e.to_string())?,
                    size: o.size.parse().map_err(|e: Error| e.to_string())?,
                    cx: o.cx,
                    cy: o.cy,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Scene { seed: rec.seed, objects })
    }
}

pub fn write_scenes(scenes: &[Scene], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        writeln!(out, "{}", s.to_json_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenes(path: &std::path::Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Scene::from_json(l).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })
        })
        .collect()
}
