//! Procedural image-caption corpus. A scene places one or two colored
//! shapes on a 4×4 cell grid; its rendering and caption are deterministic
//! functions of the scene, so captions fully determine the images they
//! describe.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FIRST_WORD;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const GRID: usize = 4;
pub const CELL: usize = 4;
pub const IMAGE_SIDE: usize = GRID * CELL;
pub const CHANNELS: usize = 3;
pub const MAX_OBJECTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Cross,
    Disk,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Disk];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Gray,
}

pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Cyan,
    Color::Magenta,
    Color::White,
    Color::Gray,
];

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
            Self::Cyan => [0.0, 1.0, 1.0],
            Self::Magenta => [1.0, 0.0, 1.0],
            Self::White => [1.0, 1.0, 1.0],
            Self::Gray => [0.5, 0.5, 0.5],
        }
    }
}

impl Shape {
    /// Whether pixel `(y, x)` of a cell is painted.
    fn covers(self, y: usize, x: usize) -> bool {
        let edge = |v: usize| v == 0 || v == CELL - 1;
        match self {
            Self::Square => true,
            Self::Cross => y == x || y + x == CELL - 1,
            Self::Disk => !(edge(y) && edge(x)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
}

/// Objects in distinct cells, sorted by cell so equal scenes compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
}

const NUMBERS: [&str; GRID] = ["one", "two", "three", "four"];
const GLUE: [&str; 5] = ["a", "in", "row", "column", "and"];

/// Caption vocabulary. Word ids start at [`FIRST_WORD`].
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&str> = GLUE.to_vec();
    words.extend(NUMBERS);
    words.extend(COLORS.iter().map(|c| color_word(*c)));
    words.extend(SHAPES.iter().map(|s| shape_word(*s)));
    words
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
        Color::Cyan => "cyan",
        Color::Magenta => "magenta",
        Color::White => "white",
        Color::Gray => "gray",
    }
}

fn shape_word(s: Shape) -> &'static str {
    match s {
        Shape::Square => "square",
        Shape::Cross => "cross",
        Shape::Disk => "disk",
    }
}

/// Smallest text vocabulary that holds every caption id.
pub fn min_text_vocab() -> usize {
    FIRST_WORD + vocabulary().len()
}

fn word_id(w: &str) -> usize {
    FIRST_WORD
        + vocabulary()
            .iter()
            .position(|&v| v == w)
            .expect("word is in the caption vocabulary")
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        objects.sort();
        let clash = objects
            .windows(2)
            .any(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col));
        if objects.is_empty() || objects.len() > MAX_OBJECTS || clash {
            return Err(Error::Contract(format!(
                "a scene needs 1..={MAX_OBJECTS} objects in distinct cells"
            )));
        }
        if objects.iter().any(|o| o.row >= GRID || o.col >= GRID) {
            return Err(Error::Contract("object outside the grid".into()));
        }
        Ok(Self { objects })
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let count = rng.random_range(1..=MAX_OBJECTS);
        let mut cells: Vec<usize> = Vec::with_capacity(count);
        while cells.len() < count {
            let c = rng.random_range(0..GRID * GRID);
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        let objects = cells
            .into_iter()
            .map(|c| Object {
                row: c / GRID,
                col: c % GRID,
                shape: SHAPES[rng.random_range(0..SHAPES.len())],
                color: COLORS[rng.random_range(0..COLORS.len())],
            })
            .collect();
        Self::new(objects).expect("sampled cells are distinct")
    }

    /// `[16 × 16 × 3]` image with a black background.
    pub fn render(&self) -> Tensor {
        let mut data = vec![0.0; IMAGE_SIDE * IMAGE_SIDE * CHANNELS];
        for o in &self.objects {
            let rgb = o.color.rgb();
            for y in 0..CELL {
                for x in 0..CELL {
                    if o.shape.covers(y, x) {
                        let p = ((o.row * CELL + y) * IMAGE_SIDE + o.col * CELL + x) * CHANNELS;
                        data[p..p + CHANNELS].copy_from_slice(&rgb);
                    }
                }
            }
        }
        Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE, CHANNELS], data).expect("fixed image shape")
    }

    /// "a red square in row two column one and a blue disk in row ..."
    pub fn caption_words(&self) -> Vec<&'static str> {
        let mut words = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                words.push("and");
            }
            words.extend([
                "a",
                color_word(o.color),
                shape_word(o.shape),
                "in",
                "row",
                NUMBERS[o.row],
                "column",
                NUMBERS[o.col],
            ]);
        }
        words
    }

    pub fn caption(&self) -> Vec<usize> {
        self.caption_words().into_iter().map(word_id).collect()
    }

    fn fingerprint(&self) -> Vec<u64> {
        self.objects
            .iter()
            .map(|o| {
                let cell = o.row * GRID + o.col;
                let style = o.shape as usize * COLORS.len() + o.color as usize;
                (cell * SHAPES.len() * COLORS.len() + style) as u64
            })
            .collect()
    }

    /// Fixed partition of all scenes: about one in eight is held out.
    pub fn split(&self) -> Split {
        if rng::mix(0x5eed, &self.fingerprint()).is_multiple_of(8) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// Recovers the scene from a caption; `None` if the ids are not a caption.
pub fn parse_caption(ids: &[usize]) -> Option<Scene> {
    let vocab = vocabulary();
    let words: Vec<&str> = ids
        .iter()
        .map(|&id| {
            id.checked_sub(FIRST_WORD)
                .and_then(|i| vocab.get(i).copied())
        })
        .collect::<Option<_>>()?;
    let number = |w: &str| NUMBERS.iter().position(|&n| n == w);
    let mut objects = Vec::new();
    for (i, chunk) in words.split(|&w| w == "and").enumerate() {
        if i >= MAX_OBJECTS {
            return None;
        }
        match chunk {
            ["a", color, shape, "in", "row", r, "column", c] => objects.push(Object {
                row: number(r)?,
                col: number(c)?,
                color: *COLORS.iter().find(|&&k| color_word(k) == *color)?,
                shape: *SHAPES.iter().find(|&&s| shape_word(s) == *shape)?,
            }),
            _ => return None,
        }
    }
    Scene::new(objects).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Which objective a sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Text,
    Image,
    Pair,
}

pub const VIEWS: [View; 3] = [View::Text, View::Image, View::Pair];

#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub pixels: Tensor,
    pub caption: Vec<usize>,
    /// The stream this sample is drawn for; `generate` cycles through
    /// text, image and pair.
    pub view: View,
}

impl Sample {
    pub fn from_scene(scene: Scene, view: View) -> Self {
        Self {
            pixels: scene.render(),
            caption: scene.caption(),
            scene,
            view,
        }
    }
}

/// Draws `count` scenes from `split`, deterministically in `(split, seed)`.
/// Scenes of the other split are rejected, so the splits never share a
/// scene.
pub fn generate(split: Split, count: usize, seed: u64) -> Vec<Sample> {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    let mut r = rng::stream(seed, &[streams::DATA, offset]);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let scene = Scene::sample(&mut r);
        if scene.split() == split {
            out.push(Sample::from_scene(scene, VIEWS[out.len() % VIEWS.len()]));
        }
    }
    out
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    scene: &'a Scene,
    view: View,
    caption: &'a [usize],
    words: Vec<&'static str>,
    pixels: &'a [f64],
}

/// Writes `corpus.json` with every sample's scene, caption and pixels.
pub fn dump(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let entries: Vec<DumpEntry> = samples
        .iter()
        .map(|s| DumpEntry {
            scene: &s.scene,
            view: s.view,
            caption: &s.caption,
            words: s.scene.caption_words(),
            pixels: s.pixels.data(),
        })
        .collect();
    std::fs::write(dir.join("corpus.json"), serde_json::to_vec(&entries)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_reads_naturally() {
        let scene = Scene::new(vec![
            Object {
                row: 1,
                col: 0,
                shape: Shape::Square,
                color: Color::Red,
            },
            Object {
                row: 3,
                col: 2,
                shape: Shape::Disk,
                color: Color::Blue,
            },
        ])
        .unwrap();
        assert_eq!(
            scene.caption_words().join(" "),
            "a red square in row two column one and a blue disk in row four column three"
        );
        assert_eq!(parse_caption(&scene.caption()), Some(scene));
    }

    #[test]
    fn render_paints_only_object_cells() {
        let scene = Scene::new(vec![Object {
            row: 0,
            col: 1,
            shape: Shape::Cross,
            color: Color::White,
        }])
        .unwrap();
        let img = scene.render();
        let lit: f64 = img.data().iter().sum();
        assert_eq!(lit, 8.0 * 3.0);
        assert_eq!(img.data()[4 * 3], 1.0);
        assert_eq!(img.data()[5 * 3], 0.0);
    }

    #[test]
    fn vocabulary_fits_the_toy_model() {
        assert!(min_text_vocab() <= 256);
        assert_eq!(vocabulary().len(), 20);
    }

    #[test]
    fn bad_scenes_are_rejected() {
        let o = Object {
            row: 0,
            col: 0,
            shape: Shape::Disk,
            color: Color::Gray,
        };
        assert!(Scene::new(vec![]).is_err());
        assert!(Scene::new(vec![o, o]).is_err());
        assert!(parse_caption(&[FIRST_WORD]).is_none());
    }
}
