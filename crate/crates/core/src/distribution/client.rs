//! Client side: one connection per worker, requests to distinct workers in
//! parallel.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use image::RgbImage;

use super::protocol::{read_message, write_message, CropEntry, Header, Message, ProtocolError};
use super::{dispatch, ClusterConfig, WorkerTiming};
use crate::detector::{check_tile, extract_tile, DetectError, Detector, DetectorProfile, FrameId, LocalDetection, Tile};
use crate::geometry::{CropSpec, MODEL_SIDE};
use crate::pipeline::{ms_since, CropEvaluator, StageOutput, StageTiming};

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Connection to one worker. Requests are serialized: one in flight.
pub struct WorkerClient {
    endpoint: String,
    timeout: Duration,
    conn: Mutex<Option<Conn>>,
}

/// Round-trip split into sending and waiting.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundTrip {
    pub transfer_ms: f64,
    pub busy_ms: f64,
}

impl WorkerClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            conn: Mutex::new(None),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn connect(&self) -> Result<Conn, DetectError> {
        let conn_err = |source| DetectError::Connection {
            endpoint: self.endpoint.clone(),
            source,
        };
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(conn_err)?
            .next()
            .ok_or_else(|| conn_err(io::Error::new(io::ErrorKind::NotFound, "no address")))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(conn_err)?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(self.timeout)).map_err(conn_err)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(conn_err)?;
        let read_half = stream.try_clone().map_err(conn_err)?;
        Ok(Conn {
            reader: BufReader::new(read_half),
            writer: BufWriter::with_capacity(1 << 20, stream),
        })
    }

    fn io_error(&self, e: io::Error) -> DetectError {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => DetectError::Timeout {
                endpoint: self.endpoint.clone(),
            },
            _ => DetectError::Connection {
                endpoint: self.endpoint.clone(),
                source: e,
            },
        }
    }

    fn protocol(&self, message: impl Into<String>) -> DetectError {
        DetectError::Protocol {
            endpoint: self.endpoint.clone(),
            message: message.into(),
        }
    }

    /// Sends one message and waits for the reply. Any failure drops the
    /// connection; the next call reconnects.
    pub fn request(&self, msg: &Message) -> Result<(Message, RoundTrip), DetectError> {
        let mut guard = self.conn.lock().expect("worker connection lock poisoned");
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let conn = guard.as_mut().expect("connected");
        let start = Instant::now();
        let result = write_message(&mut conn.writer, msg)
            .map_err(|e| self.io_error(e))
            .and_then(|()| {
                let sent = Instant::now();
                let reply = read_message(&mut conn.reader).map_err(|e| match e {
                    ProtocolError::Io(e) => self.io_error(e),
                    ProtocolError::Closed => self.protocol("connection closed before reply"),
                    other => self.protocol(other.to_string()),
                })?;
                Ok((
                    reply,
                    RoundTrip {
                        transfer_ms: (sent - start).as_secs_f64() * 1e3,
                        busy_ms: ms_since(sent),
                    },
                ))
            });
        if result.is_err() {
            *guard = None;
        }
        let (reply, rt) = result?;
        if let Header::Error { code, message } = reply.header {
            return Err(DetectError::Worker {
                endpoint: self.endpoint.clone(),
                code,
                message,
            });
        }
        Ok((reply, rt))
    }

    pub fn health(&self) -> Result<DetectorProfile, DetectError> {
        let (reply, _) = self.request(&Message::new(Header::Health))?;
        match reply.header {
            Header::HealthOk { input_side, classes } => Ok(DetectorProfile {
                input_side,
                min_confidence: 0.0,
                supported_classes: classes.into_iter().collect(),
            }),
            other => Err(self.protocol(format!("expected HEALTH_OK, got {other:?}"))),
        }
    }
}

/// Evaluates tiles on one worker. Results come back in request order,
/// matched by crop id.
pub fn remote_detect(
    frame_id: FrameId,
    tiles: &[(CropSpec, RgbImage)],
    worker: &WorkerClient,
) -> Result<(Vec<Vec<LocalDetection>>, RoundTrip), DetectError> {
    let crops = tiles
        .iter()
        .map(|(c, img)| CropEntry::for_crop(c, img.width(), img.height()))
        .collect();
    let mut payload = Vec::with_capacity(tiles.iter().map(|(_, t)| t.as_raw().len()).sum());
    for (_, img) in tiles {
        payload.extend_from_slice(img.as_raw());
    }
    let msg = Message {
        header: Header::EvalRequest { frame_id, crops },
        payload,
    };
    let (reply, rt) = worker.request(&msg)?;
    let Header::EvalResponse { frame_id: got_frame, results } = reply.header else {
        return Err(worker.protocol("expected EVAL_RESPONSE"));
    };
    if got_frame != frame_id {
        return Err(worker.protocol(format!("response for frame {got_frame}, expected {frame_id}")));
    }
    let index: HashMap<usize, usize> = tiles.iter().enumerate().map(|(i, (c, _))| (c.crop_id, i)).collect();
    let mut slots: Vec<Option<Vec<LocalDetection>>> = vec![None; tiles.len()];
    for r in results {
        let Some(&i) = index.get(&r.crop_id) else {
            return Err(worker.protocol(format!("unknown crop id {}", r.crop_id)));
        };
        if slots[i].is_some() {
            return Err(worker.protocol(format!("duplicate crop id {}", r.crop_id)));
        }
        slots[i] = Some(r.detections.into_iter().map(LocalDetection::from).collect());
    }
    let out = slots
        .into_iter()
        .zip(tiles)
        .map(|(s, (c, _))| s.ok_or_else(|| worker.protocol(format!("missing crop id {}", c.crop_id))))
        .collect::<Result<_, _>>()?;
    Ok((out, rt))
}

/// A single remote worker behind the [`Detector`] interface.
pub struct RemoteDetector {
    client: WorkerClient,
    profile: DetectorProfile,
}

impl RemoteDetector {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, DetectError> {
        let client = WorkerClient::new(endpoint, timeout);
        let profile = client.health()?;
        Ok(Self { client, profile })
    }
}

impl Detector for RemoteDetector {
    fn profile(&self) -> DetectorProfile {
        self.profile.clone()
    }

    fn detect(&self, tile: &Tile) -> Result<Vec<LocalDetection>, DetectError> {
        check_tile(tile, self.profile.input_side)?;
        let (mut out, _) = remote_detect(tile.frame_id, &[(tile.crop.clone(), tile.image.clone())], &self.client)?;
        Ok(out.pop().unwrap_or_default())
    }
}

/// A set of workers sharing a stage's crops in contiguous chunks.
pub struct WorkerPool {
    workers: Vec<WorkerClient>,
}

impl WorkerPool {
    pub fn new(endpoints: &[String], timeout: Duration) -> Self {
        assert!(!endpoints.is_empty(), "worker pool needs at least one endpoint");
        Self {
            workers: endpoints.iter().map(|e| WorkerClient::new(e.clone(), timeout)).collect(),
        }
    }

    /// Final-stage and (optional) attention-stage pools of a cluster.
    pub fn from_cluster(cluster: &ClusterConfig) -> (WorkerPool, Option<WorkerPool>) {
        let timeout = cluster.request_timeout();
        let fin = WorkerPool::new(&cluster.final_workers, timeout);
        let att = (!cluster.attention_workers.is_empty()).then(|| WorkerPool::new(&cluster.attention_workers, timeout));
        (fin, att)
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn health(&self) -> Result<Vec<DetectorProfile>, DetectError> {
        self.workers.iter().map(WorkerClient::health).collect()
    }
}

impl CropEvaluator for WorkerPool {
    fn evaluate(&self, frame_id: FrameId, frame: &RgbImage, crops: &[CropSpec]) -> Result<StageOutput, DetectError> {
        let t = Instant::now();
        let tiles: Vec<(CropSpec, RgbImage)> = crops.iter().map(|c| (c.clone(), extract_tile(frame, c))).collect();
        let client_ms = ms_since(t);
        debug_assert!(tiles.iter().all(|(_, t)| t.width() == MODEL_SIDE));

        let chunks: Vec<_> = dispatch(tiles.len(), self.workers.len())
            .into_iter()
            .zip(&self.workers)
            .filter(|(r, _)| !r.is_empty())
            .collect();
        let replies: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|(range, w)| {
                    let part = &tiles[range.clone()];
                    s.spawn(move || remote_detect(frame_id, part, w))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("dispatch thread panicked")).collect()
        });

        let mut results = Vec::with_capacity(crops.len());
        let mut timing = StageTiming {
            client_ms,
            ..Default::default()
        };
        for ((range, w), reply) in chunks.iter().zip(replies) {
            let (dets, rt) = reply?;
            results.extend(dets);
            timing.per_worker.push(WorkerTiming {
                endpoint: w.endpoint().to_string(),
                crops: range.len(),
                transfer_ms: rt.transfer_ms,
                busy_ms: rt.busy_ms,
            });
        }
        timing.eval_ms = timing.per_worker.iter().map(|w| w.busy_ms).fold(0.0, f64::max);
        timing.transfer_ms = timing.per_worker.iter().map(|w| w.transfer_ms).fold(0.0, f64::max);
        Ok(StageOutput { results, timing })
    }
}
