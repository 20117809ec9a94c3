//! Detector worker: answers evaluation requests over TCP.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use image::RgbImage;
use log::{debug, warn};

use super::protocol::{read_message, write_message, CropResult, Header, Message, ProtocolError, WireDetection};
use crate::detector::{Detector, Tile};

/// Stateless request handler around a detector.
#[derive(Clone)]
pub struct Worker {
    detector: Arc<dyn Detector>,
}

impl Worker {
    pub fn new(detector: Arc<dyn Detector>) -> Self {
        Self { detector }
    }

    pub fn handle(&self, msg: Message) -> Message {
        match msg.header {
            Header::Health => {
                let p = self.detector.profile();
                Message::new(Header::HealthOk {
                    input_side: p.input_side,
                    classes: p.supported_classes.into_iter().collect(),
                })
            }
            Header::EvalRequest { frame_id, crops } => {
                let mut offset = 0;
                let mut results = Vec::with_capacity(crops.len());
                for entry in &crops {
                    let len = entry.width as usize * entry.height as usize * 3;
                    let bytes = msg.payload[offset..offset + len].to_vec();
                    offset += len;
                    let Some(image) = RgbImage::from_raw(entry.width, entry.height, bytes) else {
                        warn!("frame {frame_id}: cannot decode tile for crop {}", entry.crop_id);
                        return Message::new(Header::error(
                            "DECODE_FAILED",
                            format!("crop {}: bad tile", entry.crop_id),
                        ));
                    };
                    let tile = Tile {
                        frame_id,
                        crop: entry.crop_spec(),
                        image,
                    };
                    match self.detector.detect(&tile) {
                        Ok(dets) => results.push(CropResult {
                            crop_id: entry.crop_id,
                            detections: dets.iter().map(WireDetection::from).collect(),
                        }),
                        Err(e) => {
                            warn!("frame {frame_id}: crop {} failed: {e}", entry.crop_id);
                            return Message::new(Header::error(
                                "DETECT_FAILED",
                                format!("crop {}: {e}", entry.crop_id),
                            ));
                        }
                    }
                }
                Message::new(Header::EvalResponse { frame_id, results })
            }
            other => Message::new(Header::error(
                "UNEXPECTED",
                format!("workers do not accept {:?}", message_kind(&other)),
            )),
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let peer = stream.peer_addr().ok();
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let reply = match read_message(&mut reader) {
                Ok(msg) => self.handle(msg),
                Err(ProtocolError::Closed) => return Ok(()),
                Err(ProtocolError::Header(e)) => Message::new(Header::error("MALFORMED", e)),
                Err(ProtocolError::HeaderTooLarge(n)) => {
                    // framing is lost; answer and drop the connection
                    write_message(&mut writer, &Message::new(Header::error("MALFORMED", format!("header of {n} bytes"))))?;
                    return Ok(());
                }
                Err(ProtocolError::Io(e)) => return Err(e),
            };
            write_message(&mut writer, &reply)?;
            debug!("answered {peer:?}");
        }
    }
}

fn message_kind(h: &Header) -> &'static str {
    match h {
        Header::EvalRequest { .. } => "EVAL_REQUEST",
        Header::EvalResponse { .. } => "EVAL_RESPONSE",
        Header::Health => "HEALTH",
        Header::HealthOk { .. } => "HEALTH_OK",
        Header::Error { .. } => "ERROR",
    }
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: TcpListener, detector: Arc<dyn Detector>) -> io::Result<()> {
    let worker = Worker::new(detector);
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let w = worker.clone();
        thread::spawn(move || {
            if let Err(e) = w.serve_connection(stream) {
                debug!("connection ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds `addr` and serves on a background thread. Returns the bound address.
pub fn spawn_worker(addr: &str, detector: Arc<dyn Detector>) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || serve(listener, detector));
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{GroundTruth, OracleConfig, OracleDetector};
    use crate::distribution::protocol::CropEntry;

    fn worker() -> Worker {
        Worker::new(Arc::new(OracleDetector::new(GroundTruth::default(), OracleConfig::default())))
    }

    #[test]
    fn health() {
        let reply = worker().handle(Message::new(Header::Health));
        assert_eq!(reply.header, Header::HealthOk { input_side: 608, classes: vec![] });
    }

    #[test]
    fn empty_request() {
        let reply = worker().handle(Message::new(Header::EvalRequest { frame_id: 9, crops: vec![] }));
        assert_eq!(reply.header, Header::EvalResponse { frame_id: 9, results: vec![] });
    }

    #[test]
    fn wrong_tile_size_is_error_response() {
        let msg = Message {
            header: Header::EvalRequest {
                frame_id: 0,
                crops: vec![CropEntry { crop_id: 1, width: 2, height: 2, global_rect: None }],
            },
            payload: vec![0; 12],
        };
        assert!(matches!(worker().handle(msg).header, Header::Error { code, .. } if code == "DETECT_FAILED"));
    }
}
