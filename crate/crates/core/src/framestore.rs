//! Raw per-clip frame containers (`AFVC` format).
//!
//! Layout: magic `AFVC`, then T, H, W as little-endian u32, then
//! `T * H * W * 3` bytes of 8-bit RGB frames in row-major order.

use crate::data_model::AnnotationRecord;
use crate::error::{CoreError, Result};
use ndarray::Array4;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"AFVC";

/// Decoded clip: `(T, H, W, 3)` of 8-bit channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFrames {
    pub data: Array4<u8>,
}

impl ClipFrames {
    pub fn new(data: Array4<u8>) -> Self {
        assert_eq!(data.shape()[3], 3, "clips are RGB");
        ClipFrames { data }
    }

    pub fn frame_count(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        for dim in [self.frame_count(), self.height(), self.width()] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        out.write_all(self.data.as_slice().expect("frame layout"))?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt_err = |message: &str| CoreError::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| fmt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic, not an AFVC clip"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut buf = [0u8; 4];
            file.read_exact(&mut buf)
                .map_err(|_| fmt_err("truncated header"))?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let [t, h, w] = dims;
        let mut data = vec![0u8; t * h * w * 3];
        file.read_exact(&mut data)
            .map_err(|_| fmt_err("truncated frame payload"))?;
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(fmt_err("trailing bytes after frame payload"));
        }
        let data = Array4::from_shape_vec((t, h, w, 3), data)
            .map_err(|_| fmt_err("dimension/payload mismatch"))?;
        Ok(ClipFrames { data })
    }
}

/// Resolves `frames_path` entries (relative paths are joined onto a base
/// directory, normally the manifest's directory).
#[derive(Debug, Clone)]
pub struct FrameStore {
    base: PathBuf,
}

impl FrameStore {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        FrameStore { base: base.into() }
    }

    pub fn path_for(&self, record: &AnnotationRecord) -> PathBuf {
        let p = Path::new(&record.frames_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Load a record's clip and cross-check its geometry.
    pub fn load_clip(&self, record: &AnnotationRecord) -> Result<ClipFrames> {
        let clip = ClipFrames::load(self.path_for(record))?;
        if clip.frame_count() != record.frame_count
            || clip.height() != record.frame_height
            || clip.width() != record.frame_width
        {
            return Err(CoreError::validation(format!(
                "clip {}: frame container is {}x{}x{} but record declares {}x{}x{}",
                record.clip_id,
                clip.frame_count(),
                clip.height(),
                clip.width(),
                record.frame_count,
                record.frame_height,
                record.frame_width
            )));
        }
        Ok(clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_round_trips_byte_exact() {
        let data: Vec<u8> = (0..(2 * 4 * 4 * 3)).map(|i| (i % 251) as u8).collect();
        let clip = ClipFrames::new(Array4::from_shape_vec((2, 4, 4, 3), data).unwrap());
        let dir = std::env::temp_dir().join("afford_test_afvc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("clip.afvc");
        clip.save(&path).unwrap();
        let loaded = ClipFrames::load(&path).unwrap();
        assert_eq!(loaded, clip);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("afford_test_afvc_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.afvc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            ClipFrames::load(&path),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = std::env::temp_dir().join("afford_test_afvc_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.afvc");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AFVC");
        for d in [2u32, 4, 4] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 10]); // far short of 2*4*4*3
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ClipFrames::load(&path),
            Err(CoreError::Format { .. })
        ));
    }
}
