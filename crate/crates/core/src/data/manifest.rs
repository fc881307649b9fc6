use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Head bounding box in image-relative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl HeadBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(Error::Validation(format!(
                "head box {coords:?} has coordinates outside [0, 1]"
            )));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Validation(format!(
                "head box {coords:?} is inverted or empty"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area of the intersection with the rectangle `[x0, y0, x1, y1]`.
    pub fn intersection_area(&self, r: [f64; 4]) -> f64 {
        let w = (self.x_max.min(r[2]) - self.x_min.max(r[0])).max(0.0);
        let h = (self.y_max.min(r[3]) - self.y_min.max(r[1])).max(0.0);
        w * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One annotated person in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub image_ref: String,
    pub head: HeadBox,
    pub gaze_points: Vec<(f64, f64)>,
    pub inside: bool,
    pub split: Split,
}

impl GazeSample {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.inside && self.gaze_points.is_empty() {
            return Err(Error::Validation(
                "inside sample carries no gaze point".into(),
            ));
        }
        if let Some(p) = self
            .gaze_points
            .iter()
            .find(|(x, y)| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return Err(Error::Validation(format!(
                "gaze point {p:?} lies outside the unit square"
            )));
        }
        if self.split == Split::Train && self.gaze_points.len() > 1 {
            return Err(Error::Validation(format!(
                "train sample has {} gaze annotations; expected one",
                self.gaze_points.len()
            )));
        }
        Ok(())
    }

    /// First annotated gaze point, when the target is in frame.
    pub fn primary_gaze(&self) -> Option<(f64, f64)> {
        if self.inside {
            self.gaze_points.first().copied()
        } else {
            None
        }
    }
}

/// Wire form of one manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub head_bbox: [f64; 4],
    #[serde(default)]
    pub gaze_points: Vec<[f64; 2]>,
    pub inside: u8,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

impl ManifestRecord {
    pub fn into_sample(self) -> Result<GazeSample> {
        let inside = match self.inside {
            0 => false,
            1 => true,
            v => return Err(Error::Validation(format!("inside flag must be 0 or 1, got {v}"))),
        };
        let sample = GazeSample {
            image_ref: self.image_path,
            head: HeadBox::from_array(self.head_bbox)?,
            gaze_points: self.gaze_points.iter().map(|p| (p[0], p[1])).collect(),
            inside,
            split: self.split.parse()?,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn from_sample(s: &GazeSample) -> Self {
        Self {
            image_path: s.image_ref.clone(),
            head_bbox: s.head.to_array(),
            gaze_points: s.gaze_points.iter().map(|&(x, y)| [x, y]).collect(),
            inside: u8::from(s.inside),
            split: s.split.to_string(),
        }
    }
}

/// Parse line-delimited JSON records; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<GazeSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let sample = record.into_sample().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<GazeSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: impl AsRef<Path>, samples: &[GazeSample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        let line = serde_json::to_string(&ManifestRecord::from_sample(s))
            .expect("manifest record serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_record_parses() {
        let s = parse_manifest(
            r#"{"image_path":"a.jpg","head_bbox":[0.1,0.1,0.3,0.3],"gaze_points":[[0.5,0.5]],"inside":1,"split":"train"}"#,
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].head, HeadBox::new(0.1, 0.1, 0.3, 0.3).unwrap());
        assert_eq!(s[0].gaze_points, vec![(0.5, 0.5)]);
        assert!(s[0].inside);
    }

    #[test]
    fn inverted_box_is_rejected() {
        let err = parse_manifest(
            r#"{"image_path":"a.jpg","head_bbox":[0.4,0.1,0.2,0.3],"gaze_points":[[0.5,0.5]],"inside":1}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "\n{\"image_path\":\"a.jpg\",\"head_bbox\":[0.1,0.1,0.3,0.3],\"inside\":0}\n{not json}\n";
        match parse_manifest(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn test_record_keeps_all_annotations() {
        let pts: Vec<String> = (0..10)
            .map(|i| format!("[{:.2},{:.2}]", 0.1 + 0.05 * i as f64, 0.5))
            .collect();
        let line = format!(
            r#"{{"image_path":"t.jpg","head_bbox":[0.1,0.1,0.2,0.2],"gaze_points":[{}],"inside":1,"split":"test"}}"#,
            pts.join(",")
        );
        let s = parse_manifest(&line).unwrap();
        assert_eq!(s[0].gaze_points.len(), 10);
        assert_eq!(s[0].split, Split::Test);
    }

    #[test]
    fn inside_without_gaze_is_rejected() {
        let err = parse_manifest(r#"{"image_path":"a","head_bbox":[0.1,0.1,0.3,0.3],"inside":1}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let err = parse_manifest(
            r#"{"image_path":"a","head_bbox":[0.1,0.1,0.3,0.3],"inside":0,"extra":1}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let samples = vec![
            GazeSample {
                image_ref: "x.png".into(),
                head: HeadBox::new(0.2, 0.2, 0.4, 0.5).unwrap(),
                gaze_points: vec![(0.7, 0.1)],
                inside: true,
                split: Split::Train,
            },
            GazeSample {
                image_ref: "y.png".into(),
                head: HeadBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                gaze_points: vec![],
                inside: false,
                split: Split::Test,
            },
        ];
        write_manifest(&path, &samples).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), samples);
    }
}
