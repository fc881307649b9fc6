//! Converters from the public GazeFollow and VideoAttentionTarget
//! annotation layouts to the line-delimited manifest.

use std::collections::BTreeMap;
use std::path::Path;

use super::{GazeSample, HeadBox, Split};
use crate::{Error, Result};

fn field(cols: &[&str], i: usize, line: usize) -> Result<f64> {
    cols.get(i)
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("missing column {i}"),
        })?
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse {
            line,
            message: format!("column {i}: {e}"),
        })
}

fn pixel_box(coords: [f64; 4], (w, h): (u32, u32)) -> Option<HeadBox> {
    let (w, h) = (w as f64, h as f64);
    HeadBox::new(
        (coords[0] / w).clamp(0.0, 1.0),
        (coords[1] / h).clamp(0.0, 1.0),
        (coords[2] / w).clamp(0.0, 1.0),
        (coords[3] / h).clamp(0.0, 1.0),
    )
    .ok()
}

/// Convert a GazeFollow annotation file.
///
/// Train rows carry an in/out column (`1` in, `0` out, `-1` unusable);
/// test rows are grouped per (image, eye position) into one sample carrying
/// all of its gaze annotations. Head boxes are given in pixels and are
/// normalised with `dims(image_path) -> (width, height)`. Returns the
/// samples and the number of rows skipped as unusable.
pub fn convert_gazefollow(
    text: &str,
    split: Split,
    dims: &mut dyn FnMut(&str) -> Result<(u32, u32)>,
) -> Result<(Vec<GazeSample>, usize)> {
    let mut samples: Vec<GazeSample> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    let mut skipped = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').collect();
        let path = cols[0].trim().to_string();
        let gaze = (field(&cols, 8, line)?, field(&cols, 9, line)?);
        let bbox = [
            field(&cols, 10, line)?,
            field(&cols, 11, line)?,
            field(&cols, 12, line)?,
            field(&cols, 13, line)?,
        ];
        let Some(head) = pixel_box(bbox, dims(&path)?) else {
            skipped += 1;
            continue;
        };
        let in_frame = (0.0..=1.0).contains(&gaze.0) && (0.0..=1.0).contains(&gaze.1);
        match split {
            Split::Train => {
                let inout = field(&cols, 14, line)?;
                let inside = match inout as i64 {
                    1 if in_frame => true,
                    0 => false,
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                samples.push(GazeSample {
                    image_ref: path,
                    head,
                    gaze_points: if inside { vec![gaze] } else { vec![] },
                    inside,
                    split,
                });
            }
            Split::Test => {
                if !in_frame {
                    skipped += 1;
                    continue;
                }
                let key = (path.clone(), cols[6].trim().to_string(), cols[7].trim().to_string());
                match groups.get(&key) {
                    Some(&idx) => samples[idx].gaze_points.push(gaze),
                    None => {
                        groups.insert(key, samples.len());
                        samples.push(GazeSample {
                            image_ref: path,
                            head,
                            gaze_points: vec![gaze],
                            inside: true,
                            split,
                        });
                    }
                }
            }
        }
    }
    Ok((samples, skipped))
}

fn sorted_dir(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Convert a VideoAttentionTarget split directory laid out as
/// `<show>/<clip>/<person>.txt`, each line `frame,xmin,ymin,xmax,ymax,gaze_x,gaze_y`
/// in pixels with `-1,-1` marking an out-of-frame target. Image references
/// are emitted as `images/<show>/<clip>/<frame>`.
pub fn convert_video_attention_target(
    split_dir: &Path,
    split: Split,
    dims: &mut dyn FnMut(&str) -> Result<(u32, u32)>,
) -> Result<(Vec<GazeSample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for show in sorted_dir(split_dir)?.into_iter().filter(|p| p.is_dir()) {
        for clip in sorted_dir(&show)?.into_iter().filter(|p| p.is_dir()) {
            for ann in sorted_dir(&clip)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            {
                let text = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
                let show_name = show.file_name().unwrap().to_string_lossy();
                let clip_name = clip.file_name().unwrap().to_string_lossy();
                for (i, raw) in text.lines().enumerate() {
                    let line = i + 1;
                    let raw = raw.trim();
                    if raw.is_empty() {
                        continue;
                    }
                    let cols: Vec<&str> = raw.split(',').collect();
                    let image_ref = format!("images/{show_name}/{clip_name}/{}", cols[0].trim());
                    let size = dims(&image_ref)?;
                    let bbox = [
                        field(&cols, 1, line)?,
                        field(&cols, 2, line)?,
                        field(&cols, 3, line)?,
                        field(&cols, 4, line)?,
                    ];
                    let Some(head) = pixel_box(bbox, size) else {
                        skipped += 1;
                        continue;
                    };
                    let (gx, gy) = (field(&cols, 5, line)?, field(&cols, 6, line)?);
                    let gaze = (gx / size.0 as f64, gy / size.1 as f64);
                    let inside = gx >= 0.0
                        && gy >= 0.0
                        && (0.0..=1.0).contains(&gaze.0)
                        && (0.0..=1.0).contains(&gaze.1);
                    samples.push(GazeSample {
                        image_ref,
                        head,
                        gaze_points: if inside { vec![gaze] } else { vec![] },
                        inside,
                        split,
                    });
                }
            }
        }
    }
    Ok((samples, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims_640x480(_: &str) -> Result<(u32, u32)> {
        Ok((640, 480))
    }

    #[test]
    fn gazefollow_train_rows() {
        let text = "\
train/a.jpg,0,0,0,1,1,0.3,0.2,0.6,0.7,64,48,128,96,1,0,0
train/b.jpg,1,0,0,1,1,0.3,0.2,-1,-1,64,48,128,96,0,0,0
train/c.jpg,2,0,0,1,1,0.3,0.2,0.5,0.5,64,48,128,96,-1,0,0
";
        let (s, skipped) = convert_gazefollow(text, Split::Train, &mut dims_640x480).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].head, HeadBox::new(0.1, 0.1, 0.2, 0.2).unwrap());
        assert_eq!(s[0].gaze_points, vec![(0.6, 0.7)]);
        assert!(!s[1].inside && s[1].gaze_points.is_empty());
        s.iter().for_each(|x| x.validate().unwrap());
    }

    #[test]
    fn gazefollow_test_rows_group_annotations() {
        let mut text = String::new();
        for k in 0..10 {
            text.push_str(&format!(
                "test/a.jpg,0,0,0,1,1,0.3,0.2,0.{k}5,0.5,64,48,128,96,0,0\n"
            ));
        }
        text.push_str("test/a.jpg,1,0,0,1,1,0.8,0.2,0.1,0.1,320,48,400,96,0,0\n");
        let (s, _) = convert_gazefollow(&text, Split::Test, &mut dims_640x480).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].gaze_points.len(), 10);
        assert_eq!(s[1].gaze_points.len(), 1);
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "a.jpg,0,0,0,1,1,0.3,0.2,0.6,oops,64,48,128,96,1\n";
        let err = convert_gazefollow(text, Split::Train, &mut dims_640x480).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn video_attention_target_layout() {
        let dir = tempfile::tempdir().unwrap();
        let clip = dir.path().join("Show").join("1000_1100");
        std::fs::create_dir_all(&clip).unwrap();
        std::fs::write(
            clip.join("s00.txt"),
            "00001.jpg,64,48,128,96,320,240\n00002.jpg,64,48,128,96,-1,-1\n",
        )
        .unwrap();
        let (s, skipped) =
            convert_video_attention_target(dir.path(), Split::Test, &mut dims_640x480).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].image_ref, "images/Show/1000_1100/00001.jpg");
        assert_eq!(s[0].gaze_points, vec![(0.5, 0.5)]);
        assert!(!s[1].inside);
    }
}
