use std::path::Path;

use super::IngestError;

/// Raw depth frame: little-endian u16, row-major, `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

/// 8-bit RGB triplets, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, raw: u16) {
        self.data[(v * self.width + u) as usize] = raw;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|d| d.to_le_bytes()).collect()
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width as usize * height as usize * 2 {
            return None;
        }
        let data = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Some(Self {
            width,
            height,
            data,
        })
    }

    pub fn read(path: &Path, width: u32, height: u32) -> Result<Self, IngestError> {
        let bytes = read_file(path)?;
        Self::from_bytes(width, height, &bytes).ok_or_else(|| IngestError::MalformedRecord {
            path: path.display().to_string(),
            index: 0,
            reason: format!("expected {}x{} u16 depth values", width, height),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        write_file(path, &self.to_bytes())
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> [u8; 3] {
        let i = (v * self.width + u) as usize * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, u: u32, v: u32, rgb: [u8; 3]) {
        let i = (v * self.width + u) as usize * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn read(path: &Path, width: u32, height: u32) -> Result<Self, IngestError> {
        let data = read_file(path)?;
        if data.len() != width as usize * height as usize * 3 {
            return Err(IngestError::MalformedRecord {
                path: path.display().to_string(),
                index: 0,
                reason: format!("expected {}x{} RGB triplets", width, height),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        write_file(path, &self.data)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(path.display().to_string())
        } else {
            IngestError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    std::fs::write(path, bytes).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}
