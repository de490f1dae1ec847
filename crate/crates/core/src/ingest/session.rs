use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{DemoAnnotation, DepthImage, IngestError, MocapFrame, RgbImage, SessionMeta};
use crate::calibration::RigExtrinsics;

const META: &str = "meta.json";
const FRAMES: &str = "frames.jsonl";
const DEMOS: &str = "demos.json";

/// A loaded capture session. Image payloads stay on disk and are read per
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub dir: PathBuf,
    pub meta: SessionMeta,
    pub rig: RigExtrinsics,
    pub frames: Vec<MocapFrame>,
}

impl Session {
    pub fn depth_path(&self, index: u32) -> PathBuf {
        frame_file(&self.dir, "depth", index)
    }

    pub fn rgb_path(&self, index: u32) -> PathBuf {
        frame_file(&self.dir, "rgb", index)
    }

    pub fn depth(&self, frame: &MocapFrame) -> Result<DepthImage, IngestError> {
        let k = &self.meta.intrinsics;
        DepthImage::read(&self.depth_path(frame.depth_index), k.width, k.height)
    }

    pub fn rgb(&self, frame: &MocapFrame) -> Result<RgbImage, IngestError> {
        let k = &self.meta.intrinsics;
        RgbImage::read(&self.rgb_path(frame.rgb_index), k.width, k.height)
    }

    pub fn annotations(&self) -> Result<Vec<DemoAnnotation>, IngestError> {
        load_annotations(&self.dir)
    }
}

pub fn frame_file(dir: &Path, kind: &str, index: u32) -> PathBuf {
    dir.join(kind).join(format!("{index:06}.bin"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(path.display().to_string())
        } else {
            IngestError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn malformed(path: &Path, index: usize, reason: impl ToString) -> IngestError {
    IngestError::MalformedRecord {
        path: path.display().to_string(),
        index,
        reason: reason.to_string(),
    }
}

pub fn load_session(dir: &Path) -> Result<Session, IngestError> {
    let meta_path = dir.join(META);
    let meta: SessionMeta =
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| malformed(&meta_path, 0, e))?;
    if meta.capture_hz == 0 {
        return Err(malformed(&meta_path, 0, "capture_hz must be positive"));
    }
    meta.intrinsics
        .validate()
        .map_err(|e| malformed(&meta_path, 0, e))?;

    let rig_path = dir.join(&meta.rig);
    if !rig_path.exists() {
        return Err(IngestError::MissingFile(rig_path.display().to_string()));
    }
    let rig = RigExtrinsics::load(&rig_path)?;

    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        if !p.is_dir() {
            return Err(IngestError::MissingFile(p.display().to_string()));
        }
    }

    let frames_path = dir.join(FRAMES);
    let text = read_text(&frames_path)?;
    let mut frames = Vec::with_capacity(meta.frame_count);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: MocapFrame = serde_json::from_str(line).map_err(|e| malformed(&frames_path, i, e))?;
        if !f.t.is_finite() {
            return Err(malformed(&frames_path, i, "non-finite timestamp"));
        }
        frames.push(f);
    }
    if frames.len() != meta.frame_count {
        return Err(IngestError::FrameCountMismatch {
            path: frames_path.display().to_string(),
            expected: meta.frame_count,
            found: frames.len(),
        });
    }
    if let Some(i) = frames.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(IngestError::NonMonotonicTimestamps {
            path: frames_path.display().to_string(),
            index: i + 1,
        });
    }

    // Image payloads must all be present; check them in parallel.
    let missing = frames.par_iter().find_map_first(|f| {
        [
            frame_file(dir, "rgb", f.rgb_index),
            frame_file(dir, "depth", f.depth_index),
        ]
        .into_iter()
        .find(|p| !p.is_file())
    });
    if let Some(p) = missing {
        return Err(IngestError::MissingFile(p.display().to_string()));
    }

    Ok(Session {
        dir: dir.to_path_buf(),
        meta,
        rig,
        frames,
    })
}

/// Writes `meta.json`, the rig file and `frames.jsonl`. Image payloads are
/// written separately with [`DepthImage::write`] / [`RgbImage::write`].
pub fn save_session(
    dir: &Path,
    meta: &SessionMeta,
    rig: &RigExtrinsics,
    frames: &[MocapFrame],
) -> Result<(), IngestError> {
    for sub in ["", "rgb", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut meta = meta.clone();
    meta.frame_count = frames.len();
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(io_err(&p))
    };
    write(META, to_json_pretty(&meta))?;
    write(&meta.rig, rig.to_json() + "\n")?;
    let mut body = String::new();
    for f in frames {
        let line = serde_json::to_string(f).expect("frame serializes");
        writeln!(body, "{line}").unwrap();
    }
    write(FRAMES, body)
}

fn to_json_pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

/// Reads `demos.json`; a session without one has no annotated demos.
pub fn load_annotations(dir: &Path) -> Result<Vec<DemoAnnotation>, IngestError> {
    let p = dir.join(DEMOS);
    if !p.exists() {
        return Ok(Vec::new());
    }
    serde_json::from_str(&read_text(&p)?).map_err(|e| malformed(&p, 0, e))
}

pub fn save_annotations(dir: &Path, annotations: &[DemoAnnotation]) -> Result<(), IngestError> {
    let p = dir.join(DEMOS);
    std::fs::write(&p, to_json_pretty(&annotations)).map_err(io_err(&p))
}
