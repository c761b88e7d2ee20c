//! Image payload encoding. Files pass through byte-for-byte; only the media
//! type is sniffed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaType {
    #[serde(rename = "image/png")]
    Png,
    #[serde(rename = "image/jpeg")]
    Jpeg,
}

impl MediaType {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }

    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]) {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
            Some(MediaType::Jpeg)
        } else {
            None
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PayloadError {
    #[error("cannot read image {}: {source}", path.display())]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format for {} (PNG and JPEG only)", .0.display())]
    UnsupportedFormat(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: MediaType,
    pub base64: String,
}

impl ImagePayload {
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let media_type = MediaType::sniff(bytes)?;
        Some(Self {
            media_type,
            base64: STANDARD.encode(bytes),
        })
    }

    pub fn decode(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.base64)
    }

    /// `data:` URL form used by chat-completion style APIs.
    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type.as_str(), self.base64)
    }
}

pub fn encode_image_payload(path: impl AsRef<Path>) -> Result<ImagePayload, PayloadError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PayloadError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    ImagePayload::from_bytes(&bytes).ok_or_else(|| PayloadError::UnsupportedFormat(path.to_path_buf()))
}

/// Resolves image records against a root directory and memoizes encoded
/// payloads, since prompt-set images are re-sent with every request.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
    cache: Arc<Mutex<HashMap<String, Arc<ImagePayload>>>>,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: Arc::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.file_path)
    }

    pub fn payload(&self, image: &ImageRecord) -> Result<Arc<ImagePayload>, PayloadError> {
        if let Some(hit) = self.cache.lock().unwrap().get(&image.image_id) {
            return Ok(hit.clone());
        }
        let payload = Arc::new(encode_image_payload(self.path_of(image))?);
        self.cache
            .lock()
            .unwrap()
            .insert(image.image_id.clone(), payload.clone());
        Ok(payload)
    }
}
