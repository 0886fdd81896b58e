//! The bisection game between a trainer holding a checkpoint tree and an
//! auditor holding its own replay of it.
//!
//! Frames are a 4-byte little-endian length followed by a UTF-8 JSON object
//! whose `"type"` names the message.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merkle::{Digest, MerkleError, MerklePath, MerkleTree, PathStep, Side};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const MAX_FRAME: u32 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum GameMessage {
    Hello {
        protocol_version: u32,
        run_id: String,
    },
    RootAnnounce {
        root: Digest,
        leaf_count: usize,
    },
    NodeRequest {
        level: usize,
        index: usize,
    },
    NodeResponse {
        level: usize,
        index: usize,
        digest: Digest,
    },
    VerdictClaim {
        first_divergent_leaf: usize,
        trainer_path: MerklePath,
        auditor_path: MerklePath,
    },
    Accept {},
    Refuse {
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error("peer did not answer in time")]
    Timeout,
    #[error("peer closed the connection")]
    Closed,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for GameError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => GameError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => GameError::Closed,
            _ => GameError::Io(e),
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &GameMessage) -> Result<(), GameError> {
    let body = serde_json::to_vec(msg).map_err(|e| GameError::Malformed(e.to_string()))?;
    let len = u32::try_from(body.len()).map_err(|_| GameError::FrameTooLarge(u32::MAX))?;
    if len > MAX_FRAME {
        return Err(GameError::FrameTooLarge(len));
    }
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> Result<GameMessage, GameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(GameError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| GameError::Malformed(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub message: GameMessage,
}

/// Ordered record of one session as seen by one party.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript(pub Vec<TranscriptEntry>);

impl Transcript {
    pub fn to_json_lines(&self) -> String {
        self.0
            .iter()
            .map(|e| serde_json::to_string(e).expect("transcript entries serialize") + "\n")
            .collect()
    }

    pub fn node_requests(&self) -> usize {
        self.0
            .iter()
            .filter(|e| matches!(e.message, GameMessage::NodeRequest { .. }))
            .count()
    }
}

/// How a session ended, from the trainer's side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEnd {
    Accepted,
    ClaimReceived(usize),
    Refused(String),
    Disconnected,
}

/// Answers one auditor until it accepts, files a claim or hangs up.
pub fn serve_session<S: Read + Write>(
    tree: &MerkleTree,
    stream: &mut S,
) -> Result<SessionEnd, GameError> {
    loop {
        let msg = match read_message(stream) {
            Ok(m) => m,
            Err(GameError::Closed) => return Ok(SessionEnd::Disconnected),
            Err(GameError::Malformed(reason)) | Err(GameError::Protocol(reason)) => {
                return refuse(stream, format!("malformed message: {reason}"));
            }
            Err(e) => return Err(e),
        };
        let reply = match msg {
            GameMessage::Hello {
                protocol_version, ..
            } if protocol_version != PROTOCOL_VERSION => {
                return refuse(
                    stream,
                    format!("unsupported protocol version {protocol_version}"),
                );
            }
            GameMessage::Hello { .. } => GameMessage::RootAnnounce {
                root: tree.root(),
                leaf_count: tree.leaf_count(),
            },
            GameMessage::NodeRequest { level, index } => match tree.node(level, index) {
                Ok(digest) => GameMessage::NodeResponse {
                    level,
                    index,
                    digest,
                },
                Err(e) => return refuse(stream, e.to_string()),
            },
            GameMessage::Accept {} => return Ok(SessionEnd::Accepted),
            GameMessage::VerdictClaim {
                first_divergent_leaf,
                ..
            } => {
                write_message(stream, &GameMessage::Accept {})?;
                return Ok(SessionEnd::ClaimReceived(first_divergent_leaf));
            }
            GameMessage::Refuse { reason } => return Ok(SessionEnd::Refused(reason)),
            other => {
                return refuse(
                    stream,
                    format!("unexpected message {}", message_type(&other)),
                )
            }
        };
        write_message(stream, &reply)?;
    }
}

fn refuse<S: Write>(stream: &mut S, reason: String) -> Result<SessionEnd, GameError> {
    // The peer may already be gone; the refusal is best effort.
    let _ = write_message(
        stream,
        &GameMessage::Refuse {
            reason: reason.clone(),
        },
    );
    Ok(SessionEnd::Refused(reason))
}

fn message_type(msg: &GameMessage) -> &'static str {
    match msg {
        GameMessage::Hello { .. } => "Hello",
        GameMessage::RootAnnounce { .. } => "RootAnnounce",
        GameMessage::NodeRequest { .. } => "NodeRequest",
        GameMessage::NodeResponse { .. } => "NodeResponse",
        GameMessage::VerdictClaim { .. } => "VerdictClaim",
        GameMessage::Accept {} => "Accept",
        GameMessage::Refuse { .. } => "Refuse",
    }
}

/// Accepts connections one at a time; stops after `max_sessions` if given.
pub fn serve(
    tree: &MerkleTree,
    listener: &TcpListener,
    idle_timeout: Option<Duration>,
    max_sessions: Option<usize>,
) -> Result<Vec<SessionEnd>, GameError> {
    let mut ends = Vec::new();
    for conn in listener.incoming() {
        let mut stream = conn?;
        stream.set_read_timeout(idle_timeout)?;
        stream.set_nodelay(true)?;
        let end = match serve_session(tree, &mut stream) {
            Ok(end) => end,
            // A stalled or vanished client ends its own session only.
            Err(GameError::Timeout) | Err(GameError::Closed) => SessionEnd::Disconnected,
            Err(e) => return Err(e),
        };
        ends.push(end);
        if max_sessions.is_some_and(|m| ends.len() >= m) {
            break;
        }
    }
    Ok(ends)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    TrainingVerified,
    DisputeAtLeaf {
        leaf: usize,
    },
    TrainerUnresponsive,
    ScheduleMismatch {
        trainer_leaves: usize,
        auditor_leaves: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub trainer_path: MerklePath,
    pub auditor_path: MerklePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub outcome: Outcome,
    /// Root the trainer announced, if it got that far.
    pub trainer_root: Option<Digest>,
    pub auditor_root: Digest,
    pub node_requests: usize,
    pub evidence: Option<Evidence>,
    pub transcript: Transcript,
}

struct Session<'a, S> {
    stream: &'a mut S,
    transcript: Transcript,
}

impl<S: Read + Write> Session<'_, S> {
    fn send(&mut self, msg: GameMessage) -> Result<(), GameError> {
        write_message(self.stream, &msg)?;
        self.transcript.0.push(TranscriptEntry {
            direction: Direction::Sent,
            message: msg,
        });
        Ok(())
    }

    fn recv(&mut self) -> Result<GameMessage, GameError> {
        let msg = read_message(self.stream)?;
        self.transcript.0.push(TranscriptEntry {
            direction: Direction::Received,
            message: msg.clone(),
        });
        Ok(msg)
    }

    fn node(&mut self, level: usize, index: usize) -> Result<Digest, GameError> {
        self.send(GameMessage::NodeRequest { level, index })?;
        match self.recv()? {
            GameMessage::NodeResponse {
                level: l,
                index: i,
                digest,
            } if (l, i) == (level, index) => Ok(digest),
            GameMessage::Refuse { reason } => {
                Err(GameError::Protocol(format!("trainer refused: {reason}")))
            }
            other => Err(GameError::Protocol(format!(
                "expected node ({level}, {index}), got {}",
                message_type(&other)
            ))),
        }
    }
}

/// Either a finished verdict or the trainer went quiet or refused.
enum Step<T> {
    Done(T),
    Unresponsive,
}

fn lift<T>(r: Result<T, GameError>) -> Result<Step<T>, GameError> {
    match r {
        Ok(v) => Ok(Step::Done(v)),
        Err(GameError::Timeout) | Err(GameError::Closed) => Ok(Step::Unresponsive),
        Err(GameError::Protocol(reason)) if reason.starts_with("trainer refused") => {
            Ok(Step::Unresponsive)
        }
        Err(e) => Err(e),
    }
}

/// Runs the auditor's side of the game over an established stream.
pub fn challenge_stream<S: Read + Write>(
    local: &MerkleTree,
    stream: &mut S,
    run_id: &str,
) -> Result<VerdictReport, GameError> {
    let mut s = Session {
        stream,
        transcript: Transcript::default(),
    };
    let mut report = VerdictReport {
        outcome: Outcome::TrainerUnresponsive,
        trainer_root: None,
        auditor_root: local.root(),
        node_requests: 0,
        evidence: None,
        transcript: Transcript::default(),
    };
    let result = descend(local, &mut s, run_id, &mut report);
    report.node_requests = s.transcript.node_requests();
    report.transcript = s.transcript;
    match lift(result)? {
        Step::Done(outcome) => report.outcome = outcome,
        Step::Unresponsive => report.outcome = Outcome::TrainerUnresponsive,
    }
    Ok(report)
}

fn descend<S: Read + Write>(
    local: &MerkleTree,
    s: &mut Session<'_, S>,
    run_id: &str,
    report: &mut VerdictReport,
) -> Result<Outcome, GameError> {
    s.send(GameMessage::Hello {
        protocol_version: PROTOCOL_VERSION,
        run_id: run_id.to_string(),
    })?;
    let (root, leaf_count) = match s.recv()? {
        GameMessage::RootAnnounce { root, leaf_count } => (root, leaf_count),
        GameMessage::Refuse { reason } => {
            return Err(GameError::Protocol(format!("trainer refused: {reason}")))
        }
        other => {
            return Err(GameError::Protocol(format!(
                "expected RootAnnounce, got {}",
                message_type(&other)
            )))
        }
    };
    report.trainer_root = Some(root);
    if leaf_count != local.leaf_count() {
        s.send(GameMessage::Refuse {
            reason: format!(
                "checkpoint schedule mismatch: {leaf_count} vs {} leaves",
                local.leaf_count()
            ),
        })?;
        return Ok(Outcome::ScheduleMismatch {
            trainer_leaves: leaf_count,
            auditor_leaves: local.leaf_count(),
        });
    }
    if root == local.root() {
        s.send(GameMessage::Accept {})?;
        return Ok(Outcome::TrainingVerified);
    }

    // Walk down from the root, keeping the trainer's digest of the current
    // node and the siblings seen on the way for the evidence path.
    let mut known = root;
    let mut index = 0;
    let mut siblings = Vec::new();
    for level in (0..local.height() - 1).rev() {
        let (left, right) = (2 * index, 2 * index + 1);
        let width = local.level_width(level).expect("level exists");
        if right >= width {
            // Promoted node: same digest one level down.
            index = left;
            continue;
        }
        let l = s.node(level, left)?;
        let r = s.node(level, right)?;
        if Digest::combine(&l, &r) != known {
            return Err(GameError::Protocol(format!(
                "trainer nodes at level {level} do not hash to their parent"
            )));
        }
        if l != local.node(level, left)? {
            siblings.push(PathStep {
                digest: r,
                side: Side::Right,
            });
            (known, index) = (l, left);
        } else {
            siblings.push(PathStep {
                digest: l,
                side: Side::Left,
            });
            (known, index) = (r, right);
        }
    }
    siblings.reverse();
    let evidence = Evidence {
        trainer_path: MerklePath {
            leaf_index: index,
            leaf_count,
            leaf: known,
            siblings,
        },
        auditor_path: local.path(index)?,
    };
    s.send(GameMessage::VerdictClaim {
        first_divergent_leaf: index,
        trainer_path: evidence.trainer_path.clone(),
        auditor_path: evidence.auditor_path.clone(),
    })?;
    report.evidence = Some(evidence);
    // The acknowledgement is a courtesy; the verdict stands without it.
    match s.recv() {
        Ok(_) | Err(GameError::Timeout) | Err(GameError::Closed) => {}
        Err(e) => return Err(e),
    }
    Ok(Outcome::DisputeAtLeaf { leaf: index })
}

/// Connects to a trainer and plays the game with `timeout` per response.
pub fn challenge(
    local: &MerkleTree,
    endpoint: impl ToSocketAddrs,
    timeout: Duration,
    run_id: &str,
) -> Result<VerdictReport, GameError> {
    let addr = endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| GameError::Io(io::Error::new(io::ErrorKind::InvalidInput, "no address")))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    challenge_stream(local, &mut stream, run_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub accepted: bool,
    pub reason: String,
}

/// Checks dispute evidence against the two committed roots using only the
/// two paths.
///
/// Besides both paths verifying and the leaves differing, every left sibling
/// on the two paths must agree: those subtrees cover exactly the leaves before
/// the disputed one, so agreement shows it is the first divergence.
pub fn judge_check(
    report: &VerdictReport,
    trainer_root: &Digest,
    auditor_root: &Digest,
) -> Judgement {
    let verdict = |accepted: bool, reason: &str| Judgement {
        accepted,
        reason: reason.to_string(),
    };
    let Outcome::DisputeAtLeaf { leaf } = report.outcome else {
        return verdict(false, "report does not claim a dispute");
    };
    let Some(ev) = &report.evidence else {
        return verdict(false, "dispute without evidence");
    };
    let (t, a) = (&ev.trainer_path, &ev.auditor_path);
    if t.leaf_index != leaf || a.leaf_index != leaf {
        return verdict(false, "paths do not point at the disputed leaf");
    }
    if t.leaf_count != a.leaf_count {
        return verdict(false, "paths disagree on the number of checkpoints");
    }
    if !t.verify(trainer_root) {
        return verdict(
            false,
            "trainer path does not verify against the trainer root",
        );
    }
    if !a.verify(auditor_root) {
        return verdict(
            false,
            "auditor path does not verify against the auditor root",
        );
    }
    if t.leaf == a.leaf {
        return verdict(false, "disputed leaves are identical");
    }
    let earlier_agree = t
        .siblings
        .iter()
        .zip(&a.siblings)
        .filter(|(x, _)| x.side == Side::Left)
        .all(|(x, y)| x.digest == y.digest);
    if !earlier_agree {
        return verdict(false, "an earlier checkpoint already differs");
    }
    verdict(
        true,
        "paths verify and the disputed leaf is the first difference",
    )
}
