//! Out-of-process proposal backends.
//!
//! Frames are a 4-byte big-endian length followed by a UTF-8 JSON body. The
//! client sends one [`BackendRequest`] and reads one [`BackendResponse`]:
//!
//! ```text
//! { "cmd": "pretrain"|"finetune"|"propose", "node": id, "kind": "and"|"or",
//!   "children": [...], "shapes": [ { "id", "label"?, "parts": [
//!       { "id", "features": [...], "points"?: [[x,y,z]...], "label"? } ] } ] }
//! -> { "proposals": [ { "shape", "parts": [...], "probabilities": [[...]] } ],
//!      "error"?: "..." }
//! ```
//!
//! Every response is validated before anything downstream sees it.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{NodeItem, NodeSpec, Proposal, Proposer, ProposerError, TrainingJob, TrainingProgress};
use crate::geometry::Point3;
use crate::label_tree::NodeKind;
use crate::PartId;

/// Largest accepted frame (256 MiB).
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Pretrain,
    Finetune,
    Propose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePart {
    pub id: PartId,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireShape {
    pub id: String,
    pub parts: Vec<WirePart>,
    /// Group label for OR-node training shapes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub cmd: Command,
    pub node: String,
    pub kind: NodeKind,
    pub children: Vec<String>,
    pub shapes: Vec<WireShape>,
}

impl BackendRequest {
    pub fn spec(&self) -> NodeSpec {
        NodeSpec {
            id: self.node.clone(),
            kind: self.kind,
            children: self.children.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireProposal {
    pub shape: String,
    pub parts: Vec<PartId>,
    pub probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    #[serde(default)]
    pub proposals: Vec<WireProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(std::io::Error::new(ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Serves framed requests on `stream` until the peer closes it.
pub fn serve_connection<S, F>(stream: &mut S, mut handler: F) -> std::io::Result<()>
where
    S: Read + Write,
    F: FnMut(BackendRequest) -> BackendResponse,
{
    while let Some(body) = read_frame(stream)? {
        let response = match serde_json::from_slice::<BackendRequest>(&body) {
            Ok(req) => handler(req),
            Err(e) => BackendResponse {
                proposals: Vec::new(),
                error: Some(format!("bad request: {e}")),
            },
        };
        write_frame(stream, &serde_json::to_vec(&response).expect("response serializes"))?;
    }
    Ok(())
}

/// One request/response exchange with a backend.
pub trait Transport: Send {
    fn roundtrip(&mut self, request: &[u8]) -> Result<Vec<u8>, ProposerError>;
}

fn map_io(e: std::io::Error) -> ProposerError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ProposerError::Timeout,
        _ => ProposerError::Io(e),
    }
}

/// Length-delimited frames over any byte stream.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write + Send> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport { stream }
    }
}

impl<S: Read + Write + Send> Transport for StreamTransport<S> {
    fn roundtrip(&mut self, request: &[u8]) -> Result<Vec<u8>, ProposerError> {
        write_frame(&mut self.stream, request).map_err(map_io)?;
        read_frame(&mut self.stream)
            .map_err(map_io)?
            .ok_or_else(|| ProposerError::Protocol("backend closed the connection".into()))
    }
}

pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<StreamTransport<TcpStream>, ProposerError> {
    let addr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| ProposerError::Protocol("address did not resolve".into()))?;
    let stream = TcpStream::connect_timeout(&addr, timeout).map_err(map_io)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(StreamTransport::new(stream))
}

/// Proposer backed by a remote process speaking the framed protocol.
pub struct ExternalProposer {
    transport: Mutex<Box<dyn Transport>>,
    include_points: bool,
}

impl ExternalProposer {
    pub fn new(transport: Box<dyn Transport>, include_points: bool) -> Self {
        ExternalProposer {
            transport: Mutex::new(transport),
            include_points,
        }
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration, include_points: bool) -> Result<Self, ProposerError> {
        Ok(Self::new(Box::new(connect_tcp(addr, timeout)?), include_points))
    }

    fn wire_parts(&self, item: &NodeItem, labels: Option<&[String]>) -> Result<Vec<WirePart>, ProposerError> {
        item.parts
            .iter()
            .enumerate()
            .map(|(i, &pid)| {
                let part = item.shape.part(pid).ok_or_else(|| ProposerError::InvalidProposal {
                    shape: item.shape.id.clone(),
                    reason: format!("unknown part {pid}"),
                })?;
                Ok(WirePart {
                    id: pid,
                    features: part.features.to_vec(),
                    points: if self.include_points { part.points.clone() } else { Vec::new() },
                    label: labels.map(|l| l[i].clone()),
                })
            })
            .collect()
    }

    fn exchange(&self, request: &BackendRequest) -> Result<BackendResponse, ProposerError> {
        let body = serde_json::to_vec(request).map_err(|e| ProposerError::Protocol(e.to_string()))?;
        let reply = self
            .transport
            .lock()
            .map_err(|_| ProposerError::Protocol("transport poisoned".into()))?
            .roundtrip(&body)?;
        let response: BackendResponse =
            serde_json::from_slice(&reply).map_err(|e| ProposerError::Protocol(format!("malformed response: {e}")))?;
        if let Some(err) = &response.error {
            return Err(ProposerError::Protocol(err.clone()));
        }
        Ok(response)
    }

    fn send_training(&self, cmd: Command, job: &TrainingJob) -> Result<(), ProposerError> {
        let shapes = job
            .items
            .iter()
            .map(|item| {
                let names: Vec<String> = item.labels.iter().map(|&l| job.node.children[l].clone()).collect();
                let node_item = NodeItem {
                    shape: item.shape.clone(),
                    parts: item.parts.clone(),
                };
                Ok(match job.node.kind {
                    NodeKind::And => WireShape {
                        id: item.shape.id.clone(),
                        parts: self.wire_parts(&node_item, Some(&names))?,
                        label: None,
                    },
                    NodeKind::Or => WireShape {
                        id: item.shape.id.clone(),
                        parts: self.wire_parts(&node_item, None)?,
                        label: names.first().cloned(),
                    },
                })
            })
            .collect::<Result<Vec<_>, ProposerError>>()?;
        self.exchange(&BackendRequest {
            cmd,
            node: job.node.id.clone(),
            kind: job.node.kind,
            children: job.node.children.clone(),
            shapes,
        })?;
        Ok(())
    }

    pub fn pretrain(&self, job: &TrainingJob) -> Result<(), ProposerError> {
        self.send_training(Command::Pretrain, job)
    }
}

/// Checks a backend reply against the request and converts it to proposals.
pub fn validate_response(
    node: &NodeSpec,
    items: &[NodeItem],
    response: BackendResponse,
) -> Result<Vec<Proposal>, ProposerError> {
    let mut by_shape: BTreeMap<String, WireProposal> = BTreeMap::new();
    for p in response.proposals {
        let id = p.shape.clone();
        if by_shape.insert(id.clone(), p).is_some() {
            return Err(ProposerError::Protocol(format!("duplicate proposal for shape `{id}`")));
        }
    }
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let p = by_shape
            .remove(&item.shape.id)
            .ok_or_else(|| ProposerError::Protocol(format!("no proposal for shape `{}`", item.shape.id)))?;
        if p.parts != item.parts {
            return Err(ProposerError::InvalidProposal {
                shape: item.shape.id.clone(),
                reason: "part list differs from request".into(),
            });
        }
        out.push(Proposal::from_distributions(node, &item.shape.id, p.parts, p.probabilities)?);
    }
    if let Some(extra) = by_shape.keys().next() {
        return Err(ProposerError::Protocol(format!("unrequested shape `{extra}`")));
    }
    Ok(out)
}

impl Proposer for ExternalProposer {
    fn name(&self) -> &str {
        "external"
    }

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError> {
        let shapes = items
            .iter()
            .map(|item| {
                Ok(WireShape {
                    id: item.shape.id.clone(),
                    parts: self.wire_parts(item, None)?,
                    label: None,
                })
            })
            .collect::<Result<Vec<_>, ProposerError>>()?;
        let response = self.exchange(&BackendRequest {
            cmd: Command::Propose,
            node: node.id.clone(),
            kind: node.kind,
            children: node.children.clone(),
            shapes,
        })?;
        validate_response(node, items, response)
    }

    fn finetune(&mut self, job: &TrainingJob, progress: &TrainingProgress) -> Result<(), ProposerError> {
        if job.items.is_empty() {
            return Ok(());
        }
        progress.start(1);
        self.send_training(Command::Finetune, job)?;
        progress.tick();
        Ok(())
    }
}
