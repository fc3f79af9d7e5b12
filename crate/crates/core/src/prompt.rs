//! Prompt strings handing region captions to a language model.
//!
//! Nothing here calls a model. The builders are pure functions and are pinned
//! by golden fixtures under `tests/fixtures/`.

use crate::error::{Error, Result};

pub const IMAGE_PREAMBLE: &str = "You are a helpful assistant answering questions about images to people. You can look at the list of  object detections in the image and answer questions. The image content may not be sufficient to answer the questions, and you may need to rely on external knowledge resources or commonsense. In an image, many objects were detected. They are listed in the following format:  [object descriptions] [cx, cy, w, h], where cx is x coordinate of the center, cy is the y coordinate of the center, w is the width and h is the height of the bounding box of that object in the image.";

pub const VIZWIZ_PREAMBLE: &str = "You are a helpful assistant answering questions about images to people. You can look at the list of  object detections in the image and answer questions. The image content may not be sufficient to answer the questions, and you may need to rely on external knowledge resources or commonsense. In an image, many objects were detected. They are listed in the following format:  [object descriptions] [cx, cy, w, h] [score], where cx is x coordinate of the center, cy is the y coordinate of the center, w is the width,  h is the height and score is the confidence score for the object detection. Low score means the detection is likely inaccurate, and this often makes the question unanswerable. You can answer questions as 'unanswerable'.";

pub const VIDEO_PREAMBLE: &str = "You are a helpful assistant answering questions about videos to people. You can look at the list of  object detections in each frame and answer questions.";

pub const OBJECTS_HEADER: &str = "The list of objects is as follows: ";

pub const MAX_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Standard,
    /// Adds a detection score after each box and the "unanswerable" preamble.
    Vizwiz,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "vizwiz" => Ok(Variant::Vizwiz),
            other => Err(Error::Prompt(format!("unknown prompt variant `{other}`"))),
        }
    }
}

/// One detected object: its captions and a pixel box `(cx, cy, w, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLine {
    pub captions: Vec<String>,
    pub bbox: [u32; 4],
    pub score: Option<f64>,
}

impl ObjectLine {
    pub fn new(captions: Vec<String>, bbox: [u32; 4]) -> Self {
        ObjectLine { captions, bbox, score: None }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    fn check_within(&self, width: u32, height: u32) -> Result<()> {
        let [cx, cy, w, h] = self.bbox;
        if cx > width || cy > height || w > width || h > height {
            return Err(Error::Prompt(format!(
                "box [{cx}, {cy}, {w}, {h}] does not fit a {width}x{height} image"
            )));
        }
        Ok(())
    }
}

/// `captions [cx, cy, w, h],` with `[score]` before the comma for vizwiz.
pub fn format_object_line(line: &ObjectLine, variant: Variant) -> Result<String> {
    if line.captions.is_empty() {
        return Err(Error::Prompt("object line has no captions".into()));
    }
    let [cx, cy, w, h] = line.bbox;
    let mut s = format!("{} [{cx}, {cy}, {w}, {h}]", line.captions.join(", "));
    if variant == Variant::Vizwiz {
        let score = line
            .score
            .ok_or_else(|| Error::Prompt("vizwiz object line needs a score".into()))?;
        s.push_str(&format!(" [{score}]"));
    }
    s.push(',');
    Ok(s)
}

pub fn image_size_prompt(width: u32, height: u32) -> String {
    format!("The height of the image is {height} and width of the image is {width}")
}

pub fn image_description_prompt(captions: &[String]) -> String {
    format!("Full images descriptions for this image are: {}", captions.join(", "))
}

pub fn question_prompt(question: &str) -> String {
    format!("Q: {question} Answer in one word. A:")
}

/// Preamble, image size, image captions, object list and question, joined by
/// single spaces.
pub fn build_vqa_prompt(
    width: u32,
    height: u32,
    image_captions: &[String],
    objects: &[ObjectLine],
    question: &str,
    variant: Variant,
) -> Result<String> {
    let mut listing = String::from(OBJECTS_HEADER);
    for obj in objects {
        obj.check_within(width, height)?;
        listing.push_str(&format_object_line(obj, variant)?);
    }
    let preamble = match variant {
        Variant::Standard => IMAGE_PREAMBLE,
        Variant::Vizwiz => VIZWIZ_PREAMBLE,
    };
    Ok([
        preamble.to_string(),
        image_size_prompt(width, height),
        image_description_prompt(image_captions),
        listing,
        question_prompt(question),
    ]
    .join(" "))
}

/// A sampled frame and the captions of the objects found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub captions: Vec<String>,
}

/// Video preamble, one block per frame in the given order, then the question.
pub fn build_video_prompt(frames: &[Frame], question: &str) -> Result<String> {
    if frames.len() > MAX_FRAMES {
        return Err(Error::Prompt(format!("{} frames given, at most {MAX_FRAMES} allowed", frames.len())));
    }
    let mut parts = vec![VIDEO_PREAMBLE.to_string()];
    for f in frames {
        let mut block = format!("In frame {}, following objects were detected", f.index);
        if !f.captions.is_empty() {
            block.push(' ');
            for c in &f.captions {
                block.push_str(c);
                block.push(',');
            }
        }
        parts.push(block);
    }
    parts.push(question_prompt(question));
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn object_lines() {
        let line = ObjectLine::new(strs(&["red circle"]), [32, 16, 10, 10]);
        assert_eq!(format_object_line(&line, Variant::Standard).unwrap(), "red circle [32, 16, 10, 10],");
        let two = ObjectLine::new(strs(&["ball", "red ball"]), [1, 2, 3, 4]).with_score(0.9);
        assert_eq!(format_object_line(&two, Variant::Vizwiz).unwrap(), "ball, red ball [1, 2, 3, 4] [0.9],");
        assert_eq!(format_object_line(&two, Variant::Standard).unwrap(), "ball, red ball [1, 2, 3, 4],");

        let empty = ObjectLine::new(vec![], [0, 0, 1, 1]);
        assert!(format_object_line(&empty, Variant::Standard).is_err());
        let unscored = ObjectLine::new(strs(&["ball"]), [0, 0, 1, 1]);
        assert!(format_object_line(&unscored, Variant::Vizwiz).is_err());
    }

    #[test]
    fn vqa_sections() {
        let p = build_vqa_prompt(64, 48, &strs(&["a red ball"]), &[], "what color is the ball", Variant::Standard).unwrap();
        assert!(p.starts_with(IMAGE_PREAMBLE));
        assert!(p.ends_with("Q: what color is the ball Answer in one word. A:"));
        assert!(p.contains("The height of the image is 48 and width of the image is 64 "));
        assert!(p.contains(" The list of objects is as follows:  Q:"));

        let v = build_vqa_prompt(64, 48, &[], &[], "q", Variant::Vizwiz).unwrap();
        assert!(v.starts_with(VIZWIZ_PREAMBLE));
        assert!(v.contains("You can answer questions as 'unanswerable'."));

        let outside = ObjectLine::new(strs(&["ball"]), [65, 10, 4, 4]);
        assert!(build_vqa_prompt(64, 48, &[], &[outside], "q", Variant::Standard).is_err());
    }

    #[test]
    fn video_blocks() {
        let one = build_video_prompt(&[Frame { index: 0, captions: strs(&["red circle"]) }], "q").unwrap();
        assert!(one.contains("In frame 0, following objects were detected red circle,"));

        let frames: Vec<Frame> = (0..8).map(|i| Frame { index: i * 4, captions: strs(&["x"]) }).collect();
        let p = build_video_prompt(&frames, "q").unwrap();
        let pos: Vec<usize> = frames
            .iter()
            .map(|f| p.find(&format!("In frame {},", f.index)).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));

        let nine: Vec<Frame> = (0..9).map(|i| Frame { index: i, captions: vec![] }).collect();
        assert!(build_video_prompt(&nine, "q").is_err());

        assert_eq!(
            build_video_prompt(&[], "what happens").unwrap(),
            format!("{VIDEO_PREAMBLE} Q: what happens Answer in one word. A:")
        );
    }
}
