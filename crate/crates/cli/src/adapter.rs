//! External detectors behind a child-process contract.
//!
//! For `cmd:<program> [args..]` each `detect` call writes the images as
//! PNGs into a fresh directory together with `manifest.jsonl` (boxes
//! empty), then runs `<program> [args..] <dir> <dir>/detections.jsonl`.
//! The program must exit 0 and write one manifest line per image, boxes in
//! normalized coordinates, each with a `score` in `[0, 1]`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use advart::detector::{Detection, Detector};
use advart::imaging::{save_image, ImageRGB};

use crate::error::CliError;
use crate::manifest::{parse_records, records_to_text, SceneRecord};

pub const ADAPTER_PREFIX: &str = "cmd:";

#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub program: String,
    pub args: Vec<String>,
}

static CALLS: AtomicUsize = AtomicUsize::new(0);

struct ScratchDir(PathBuf);

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

impl ExternalDetector {
    /// Parses `cmd:<program> [args..]`.
    pub fn parse(spec: &str) -> Option<Self> {
        let rest = spec.strip_prefix(ADAPTER_PREFIX)?;
        let mut parts = rest.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
        })
    }

    fn fail(&self, message: impl Into<String>) -> advart::Error {
        let e = CliError::Adapter {
            program: self.program.clone(),
            message: message.into(),
        };
        advart::Error::InvalidArgument(e.to_string())
    }

    fn run(&self, dir: &Path, images: &[ImageRGB]) -> advart::Result<Vec<Vec<Detection>>> {
        let mut names = Vec::with_capacity(images.len());
        let mut records = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let name = format!("scene_{i:05}.png");
            save_image(img, dir.join(&name))?;
            records.push(SceneRecord {
                image: name.clone(),
                boxes: vec![],
                split: None,
            });
            names.push(name);
        }
        std::fs::write(dir.join("manifest.jsonl"), records_to_text(&records))
            .map_err(|e| self.fail(format!("writing inputs: {e}")))?;
        let out = dir.join("detections.jsonl");
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(dir)
            .arg(&out)
            .status()
            .map_err(|e| self.fail(format!("could not start: {e}")))?;
        if !status.success() {
            return Err(self.fail(format!("exited with {status}")));
        }
        let text = std::fs::read_to_string(&out).map_err(|e| self.fail(format!("reading {}: {e}", out.display())))?;
        let parsed = parse_records(&text, &out).map_err(|e| self.fail(e.to_string()))?;
        let mut by_name: HashMap<String, Vec<Detection>> = HashMap::new();
        for rec in parsed {
            let mut dets = Vec::with_capacity(rec.boxes.len());
            for b in &rec.boxes {
                let score = b
                    .score
                    .filter(|s| (0.0..=1.0).contains(s))
                    .ok_or_else(|| self.fail(format!("{}: every box needs a score in [0, 1]", rec.image)))?;
                let mut class_probs = vec![0.0; (b.class + 1).max(2)];
                class_probs[b.class] = 1.0;
                dets.push(Detection {
                    bbox: b.to_box(),
                    objectness: score,
                    class_probs,
                });
            }
            by_name.insert(rec.image, dets);
        }
        names
            .iter()
            .map(|n| by_name.remove(n).ok_or_else(|| self.fail(format!("no detections listed for {n}"))))
            .collect()
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, images: &[ImageRGB]) -> advart::Result<Vec<Vec<Detection>>> {
        let call = CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("advart-adapter-{}-{call}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| self.fail(format!("creating {}: {e}", dir.display())))?;
        let guard = ScratchDir(dir);
        self.run(&guard.0, images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_program_and_arguments() {
        let d = ExternalDetector::parse("cmd:python3 det.py --fast").unwrap();
        assert_eq!(d.program, "python3");
        assert_eq!(d.args, ["det.py", "--fast"]);
        assert!(ExternalDetector::parse("cmd:").is_none());
        assert!(ExternalDetector::parse("model.bin").is_none());
    }
}
