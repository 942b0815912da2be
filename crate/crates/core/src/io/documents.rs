//! JSON documents: annotations and the shared proposal/detection format.
//! Files count frames 1-based and inclusive; memory uses 0-based half-open
//! spans, so `[start_frame, end_frame]` becomes `[start_frame - 1, end_frame)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};
use crate::evaluation::{VideoDetections, VideoGroundTruth};
use crate::localization::Detection;
use crate::timeline::{GroundTruthInstance, TemporalInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub video_id: String,
    pub num_frames: usize,
    pub fps: f64,
    pub classes: Vec<String>,
    pub instances: Vec<InstanceDoc>,
}

/// A validated annotation record.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub num_frames: usize,
    pub fps: f64,
    pub classes: Vec<String>,
    pub instances: Vec<GroundTruthInstance>,
}

impl VideoAnnotation {
    pub fn to_doc(&self) -> AnnotationDoc {
        AnnotationDoc {
            video_id: self.video_id.clone(),
            num_frames: self.num_frames,
            fps: self.fps,
            classes: self.classes.clone(),
            instances: self
                .instances
                .iter()
                .map(|i| InstanceDoc {
                    label: self.classes[i.label].clone(),
                    start_frame: i.interval.start() + 1,
                    end_frame: i.interval.end(),
                })
                .collect(),
        }
    }

    pub fn ground_truth(&self) -> VideoGroundTruth {
        VideoGroundTruth {
            video_id: self.video_id.clone(),
            instances: self.instances.clone(),
        }
    }
}

/// Converts a 1-based inclusive frame pair to a half-open interval.
pub fn from_closed(start_frame: usize, end_frame: usize) -> Result<TemporalInterval> {
    if start_frame == 0 {
        return Err(EtpError::invalid("start_frame is 1-based and must be at least 1"));
    }
    if end_frame < start_frame {
        return Err(EtpError::invalid(format!(
            "end_frame {end_frame} precedes start_frame {start_frame}"
        )));
    }
    TemporalInterval::new(start_frame - 1, end_frame)
}

/// `(start_frame, end_frame)` in the 1-based inclusive file convention.
pub fn to_closed(iv: &TemporalInterval) -> (usize, usize) {
    (iv.start() + 1, iv.end())
}

fn validate_doc(doc: &AnnotationDoc, at: &str) -> std::result::Result<VideoAnnotation, String> {
    if doc.num_frames == 0 {
        return Err(format!("{at}.num_frames: must be at least 1"));
    }
    if !(doc.fps > 0.0 && doc.fps.is_finite()) {
        return Err(format!("{at}.fps: must be positive"));
    }
    if doc.classes.is_empty() {
        return Err(format!("{at}.classes: at least one class is required"));
    }
    let mut instances = Vec::with_capacity(doc.instances.len());
    for (i, inst) in doc.instances.iter().enumerate() {
        let here = format!("{at}.instances[{i}]");
        let label = doc
            .classes
            .iter()
            .position(|c| *c == inst.label)
            .ok_or_else(|| format!("{here}.label: `{}` is not a listed class", inst.label))?;
        if inst.start_frame < 1 {
            return Err(format!("{here}.start_frame: must be at least 1"));
        }
        if inst.end_frame < inst.start_frame {
            return Err(format!(
                "{here}.end_frame: {} precedes start_frame {}",
                inst.end_frame, inst.start_frame
            ));
        }
        if inst.end_frame > doc.num_frames {
            return Err(format!(
                "{here}.end_frame: {} exceeds num_frames {}",
                inst.end_frame, doc.num_frames
            ));
        }
        let interval = from_closed(inst.start_frame, inst.end_frame).map_err(|e| format!("{here}: {e}"))?;
        instances.push(GroundTruthInstance { interval, label });
    }
    Ok(VideoAnnotation {
        video_id: doc.video_id.clone(),
        num_frames: doc.num_frames,
        fps: doc.fps,
        classes: doc.classes.clone(),
        instances,
    })
}

/// Parses and validates an annotation array. Diagnostics carry the JSON path
/// of the offending field.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<VideoAnnotation>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let docs: Vec<AnnotationDoc> = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        EtpError::format(path, format!("{at}: {}", e.inner()))
    })?;
    let mut seen = std::collections::HashSet::new();
    docs.iter()
        .enumerate()
        .map(|(i, doc)| {
            if !seen.insert(doc.video_id.as_str()) {
                return Err(EtpError::format(
                    path,
                    format!("[{i}].video_id: duplicate `{}`", doc.video_id),
                ));
            }
            validate_doc(doc, &format!("[{i}]")).map_err(|m| EtpError::format(path, m))
        })
        .collect()
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| EtpError::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn save_annotations(path: &Path, videos: &[VideoAnnotation]) -> Result<()> {
    let docs: Vec<AnnotationDoc> = videos.iter().map(VideoAnnotation::to_doc).collect();
    write_json(path, &docs)
}

/// The class list shared by every record.
pub fn class_vocabulary(videos: &[VideoAnnotation]) -> Result<Vec<String>> {
    let first = videos
        .first()
        .ok_or_else(|| EtpError::invalid("annotation set is empty"))?;
    if let Some(v) = videos.iter().find(|v| v.classes != first.classes) {
        return Err(EtpError::invalid(format!(
            "video `{}` lists classes {:?}, expected {:?}",
            v.video_id, v.classes, first.classes
        )));
    }
    Ok(first.classes.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemDoc {
    pub start_frame: usize,
    pub end_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalDoc {
    pub video_id: String,
    pub items: Vec<ItemDoc>,
}

/// A scored interval with an optional class, as stored in proposal and
/// detection files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub interval: TemporalInterval,
    pub label: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoItems {
    pub video_id: String,
    pub items: Vec<Item>,
}

impl VideoItems {
    pub fn intervals(&self) -> Vec<TemporalInterval> {
        self.items.iter().map(|i| i.interval).collect()
    }

    /// Every item must carry a label.
    pub fn detections(&self) -> Result<VideoDetections> {
        let detections = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let label = it
                    .label
                    .ok_or_else(|| EtpError::invalid(format!("video `{}` item {i} has no label", self.video_id)))?;
                Ok(Detection {
                    interval: it.interval,
                    label,
                    score: it.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(VideoDetections {
            video_id: self.video_id.clone(),
            detections,
        })
    }

    pub fn from_detections(video_id: &str, dets: &[Detection]) -> Self {
        Self {
            video_id: video_id.to_string(),
            items: dets
                .iter()
                .map(|d| Item {
                    interval: d.interval,
                    label: Some(d.label),
                    score: d.score,
                })
                .collect(),
        }
    }
}

/// Labels index into `classes`; labels outside it are written without a
/// name (class-agnostic).
pub fn items_to_docs(videos: &[VideoItems], classes: &[String]) -> Vec<ProposalDoc> {
    videos
        .iter()
        .map(|v| ProposalDoc {
            video_id: v.video_id.clone(),
            items: v
                .items
                .iter()
                .map(|it| {
                    let (start_frame, end_frame) = to_closed(&it.interval);
                    ItemDoc {
                        start_frame,
                        end_frame,
                        label: it.label.and_then(|l| classes.get(l).cloned()),
                        score: it.score,
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn parse_items(text: &str, path: &Path, classes: &[String]) -> Result<Vec<VideoItems>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let docs: Vec<ProposalDoc> = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        EtpError::format(path, format!("{at}: {}", e.inner()))
    })?;
    docs.into_iter()
        .enumerate()
        .map(|(v, doc)| {
            let items =
                doc.items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| {
                        let here = format!("[{v}].items[{i}]");
                        let interval = from_closed(it.start_frame, it.end_frame)
                            .map_err(|e| EtpError::format(path, format!("{here}: {e}")))?;
                        if !it.score.is_finite() {
                            return Err(EtpError::format(path, format!("{here}.score: must be finite")));
                        }
                        let label = match &it.label {
                            None => None,
                            Some(name) => Some(classes.iter().position(|c| c == name).ok_or_else(|| {
                                EtpError::format(path, format!("{here}.label: unknown class `{name}`"))
                            })?),
                        };
                        Ok(Item {
                            interval,
                            label,
                            score: it.score,
                        })
                    })
                    .collect::<Result<_>>()?;
            Ok(VideoItems {
                video_id: doc.video_id,
                items,
            })
        })
        .collect()
}

pub fn load_items(path: &Path, classes: &[String]) -> Result<Vec<VideoItems>> {
    let text = std::fs::read_to_string(path).map_err(|e| EtpError::io(path, e))?;
    parse_items(&text, path, classes)
}

pub fn save_items(path: &Path, videos: &[VideoItems], classes: &[String]) -> Result<()> {
    write_json(path, &items_to_docs(videos, classes))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| EtpError::format(path, format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| EtpError::io(path, e))
}
