//! Length-prefixed wire format between client and workers.
//!
//! ```text
//! +----------------+----------------------+-------------------------+
//! | u32 BE: N      | N bytes UTF-8 JSON   | payload (size implied   |
//! |                | header               | by the header)          |
//! +----------------+----------------------+-------------------------+
//! ```
//!
//! Only `EVAL_REQUEST` carries a payload: the raw 8-bit RGB tiles of its
//! `crops`, concatenated in listed order, `width * height * 3` bytes each.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{FrameId, LocalDetection};
use crate::geometry::{CropSpec, LocalRect, Rect};

/// Upper bound on a JSON header.
pub const MAX_HEADER_BYTES: usize = 16 << 20;
/// Upper bound on one tile side.
pub const MAX_TILE_SIDE: u32 = 8192;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("header of {0} bytes exceeds limit")]
    HeaderTooLarge(usize),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub crop_id: usize,
    pub width: u32,
    pub height: u32,
    /// `[x, y, w, h]` of the crop in the source frame, for detectors that
    /// need crop geometry (the ground-truth oracle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_rect: Option<[i64; 4]>,
}

impl CropEntry {
    pub fn for_crop(crop: &CropSpec, width: u32, height: u32) -> Self {
        let r = crop.global_rect;
        Self {
            crop_id: crop.crop_id,
            width,
            height,
            global_rect: Some([r.x, r.y, r.w, r.h]),
        }
    }

    /// The crop this entry describes; without geometry, a crop at the origin
    /// whose side equals the tile width.
    pub fn crop_spec(&self) -> CropSpec {
        match self.global_rect.and_then(|[x, y, w, h]| Rect::try_new(x, y, w, h).ok()) {
            Some(rect) => CropSpec {
                crop_id: self.crop_id,
                row: 0,
                col: 0,
                global_rect: rect,
                scale: rect.w as f64 / self.width as f64,
            },
            None => CropSpec::square(self.crop_id, 0, 0, self.width),
        }
    }

    fn tile_bytes(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: String,
    pub confidence: f64,
}

impl From<&LocalDetection> for WireDetection {
    fn from(d: &LocalDetection) -> Self {
        Self {
            x: d.rect.x,
            y: d.rect.y,
            w: d.rect.w,
            h: d.rect.h,
            class: d.class_label.clone(),
            confidence: d.confidence,
        }
    }
}

impl From<WireDetection> for LocalDetection {
    fn from(d: WireDetection) -> Self {
        Self {
            rect: LocalRect::new(d.x, d.y, d.w, d.h),
            class_label: d.class,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropResult {
    pub crop_id: usize,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Header {
    #[serde(rename = "EVAL_REQUEST")]
    EvalRequest { frame_id: FrameId, crops: Vec<CropEntry> },
    #[serde(rename = "EVAL_RESPONSE")]
    EvalResponse { frame_id: FrameId, results: Vec<CropResult> },
    #[serde(rename = "HEALTH")]
    Health,
    #[serde(rename = "HEALTH_OK")]
    HealthOk { input_side: u32, classes: Vec<String> },
    #[serde(rename = "ERROR")]
    Error { code: String, message: String },
}

impl Header {
    /// Payload size this header declares.
    pub fn payload_len(&self) -> usize {
        match self {
            Header::EvalRequest { crops, .. } => crops.iter().map(CropEntry::tile_bytes).sum(),
            _ => 0,
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Header::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            payload: Vec::new(),
        }
    }
}

pub fn encode_header(header: &Header) -> Vec<u8> {
    serde_json::to_vec(header).expect("headers always serialize")
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    debug_assert_eq!(msg.header.payload_len(), msg.payload.len());
    let header = encode_header(&msg.header);
    w.write_all(&(header.len() as u32).to_be_bytes())?;
    w.write_all(&header)?;
    w.write_all(&msg.payload)?;
    w.flush()
}

/// Reads one frame. A header that is valid framing but not a valid message
/// is returned as [`ProtocolError::Header`] with the stream left positioned
/// after it.
pub fn read_message(r: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(ProtocolError::Closed),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_HEADER_BYTES {
        return Err(ProtocolError::HeaderTooLarge(n));
    }
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    let header: Header = serde_json::from_slice(&raw).map_err(|e| ProtocolError::Header(e.to_string()))?;
    if let Header::EvalRequest { crops, .. } = &header {
        if let Some(c) = crops
            .iter()
            .find(|c| c.width == 0 || c.height == 0 || c.width > MAX_TILE_SIDE || c.height > MAX_TILE_SIDE)
        {
            return Err(ProtocolError::Header(format!(
                "crop {} has unsupported size {}x{}",
                c.crop_id, c.width, c.height
            )));
        }
    }
    let mut payload = vec![0u8; header.payload_len()];
    r.read_exact(&mut payload)?;
    Ok(Message { header, payload })
}
