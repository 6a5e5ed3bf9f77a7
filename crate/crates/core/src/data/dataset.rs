//! Dataset directories: `manifest.txt` with one row per clip
//! (`id label frames height width vx vy`) and one `clip_NNNNN.f32` blob per
//! clip holding little-endian `f32` frames in `T×C×H×W` order.

use std::fs;
use std::path::Path;

use super::Clip;
use crate::error::{OffError, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# id label frames height width vx vy";

pub fn blob_name(id: usize) -> String {
    format!("clip_{id:05}.f32")
}

/// True when `dir` exists and holds at least one entry.
pub fn dir_has_entries(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(OffError::io(format!("reading {}", dir.display()))(e)),
    }
}

pub fn save_dataset(dir: &Path, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(OffError::io(format!("creating {}", dir.display())))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for (id, clip) in clips.iter().enumerate() {
        let s = clip.frames.shape();
        let (vx, vy) = clip.velocity.unwrap_or((f64::NAN, f64::NAN));
        manifest.push_str(&format!("{id} {} {} {} {} {vx} {vy}\n", clip.label, s.n, s.h, s.w));
        let bytes: Vec<u8> = clip.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(blob_name(id));
        fs::write(&path, bytes).map_err(OffError::io(format!("writing {}", path.display())))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(OffError::io(format!("writing {}", path.display())))
}

fn field<T: std::str::FromStr>(path: &Path, entry: &str, name: &str, raw: Option<&str>) -> Result<T> {
    let raw = raw.ok_or_else(|| OffError::format(path, entry, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| OffError::format(path, entry, format!("bad {name} `{raw}`")))
}

/// Loads every clip listed in the manifest. The channel count follows from
/// the blob size.
pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(OffError::io(format!("reading {}", path.display())))?;
    let mut clips = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: usize = field(&path, line, "id", it.next())?;
        let entry = format!("clip {id}");
        let label: usize = field(&path, &entry, "label", it.next())?;
        let t: usize = field(&path, &entry, "frames", it.next())?;
        let h: usize = field(&path, &entry, "height", it.next())?;
        let w: usize = field(&path, &entry, "width", it.next())?;
        let vx: f64 = field(&path, &entry, "vx", it.next())?;
        let vy: f64 = field(&path, &entry, "vy", it.next())?;
        if it.next().is_some() {
            return Err(OffError::format(&path, &entry, "trailing fields"));
        }
        if id != clips.len() {
            return Err(OffError::format(&path, &entry, format!("expected id {}", clips.len())));
        }
        let blob = dir.join(blob_name(id));
        let bytes = fs::read(&blob).map_err(OffError::io(format!("reading {}", blob.display())))?;
        let plane = t * h * w * 4;
        if plane == 0 || bytes.len() % plane != 0 || bytes.is_empty() {
            return Err(OffError::format(
                &blob,
                &entry,
                format!("{} bytes is not a whole number of {t}x{h}x{w} f32 frames", bytes.len()),
            ));
        }
        let c = bytes.len() / plane;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let frames = Tensor::from_vec(Shape::new(t, c, h, w), data)?;
        let velocity = (vx.is_finite() && vy.is_finite()).then_some((vx, vy));
        clips.push(Clip {
            frames,
            label,
            velocity,
            motion: None,
        });
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_direction_dataset, Pattern};

    #[test]
    fn roundtrip_keeps_frames_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let clips = gen_direction_dataset(1, 3, 16, 0.5, Pattern::Gaussian { sigma: 2.0 }, 4).unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.label, b.label);
            assert_eq!(a.velocity, b.velocity);
        }
    }

    #[test]
    fn truncated_blob_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = gen_direction_dataset(1, 2, 8, 0.5, Pattern::Gaussian { sigma: 1.0 }, 4).unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let blob = dir.path().join(blob_name(3));
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, OffError::Format { entry, .. } if entry == "clip 3"), "{err}");
    }
}
