//! Lockstep co-simulation over newline-delimited JSON on TCP.
//!
//! Each tick the server sends one `frame` and blocks until the client
//! answers with a `cmd` echoing that tick (or a `reset`). Results depend
//! only on the seed, the configuration and the command sequence.

use crate::dynamics::ControlInput;
use crate::eval::{LogRecord, RunLog};
use crate::geometry::Pose2;
use crate::sensors::{ImuSample, OdomSample};
use crate::world::World;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Decode(String),
    #[error("expected a {expected} message, got {got}")]
    Unexpected {
        expected: &'static str,
        got: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("command log has a tick gap: expected tick {expected}, found {found}")]
    TickGap { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuWire {
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub psi: f64,
    pub psi_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdomWire {
    pub vx: f64,
    pub vy: f64,
    pub psi_dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPayload {
    pub fov: f64,
    pub ranges: Vec<f64>,
}

/// Sensor output of one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub tick: u64,
    pub time: f64,
    pub imu: ImuSample,
    pub odom: OdomSample,
    pub scan: Option<ScanPayload>,
    /// Ground-truth pose, present only when the server exposes it.
    pub pose: Option<Pose2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub tick: u64,
    pub a: f64,
    pub delta: f64,
}

impl Command {
    pub fn input(&self) -> ControlInput {
        ControlInput::new(self.a, self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMsg {
    pub tick: u64,
    pub time: f64,
    pub imu: ImuWire,
    pub odom: OdomWire,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdMsg {
    pub tick: u64,
    pub a: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetMsg {
    pub pose: Pose2,
}

/// Protocol v1 messages, tagged by `"type"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    #[serde(rename = "frame")]
    Frame(FrameMsg),
    #[serde(rename = "cmd")]
    Cmd(CmdMsg),
    #[serde(rename = "reset")]
    Reset(ResetMsg),
}

impl Message {
    fn kind(&self) -> &'static str {
        match self {
            Message::Frame(_) => "frame",
            Message::Cmd(_) => "cmd",
            Message::Reset(_) => "reset",
        }
    }

    /// One JSON line including the trailing newline.
    pub fn encode(&self) -> String {
        let mut s = serde_json::to_string(self).expect("protocol messages serialize");
        s.push('\n');
        s
    }

    pub fn decode(line: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(line.trim_end()).map_err(|e| ProtocolError::Decode(e.to_string()))
    }
}

impl From<&SensorFrame> for FrameMsg {
    fn from(f: &SensorFrame) -> Self {
        FrameMsg {
            tick: f.tick,
            time: f.time,
            imu: ImuWire {
                ax: f.imu.a_x,
                ay: f.imu.a_y,
                az: f.imu.a_z,
                psi: f.imu.psi,
                psi_dot: f.imu.psi_dot,
            },
            odom: OdomWire {
                vx: f.odom.v_x,
                vy: f.odom.v_y,
                psi_dot: f.odom.psi_dot,
            },
            scan: f.scan.clone(),
            pose: f.pose,
        }
    }
}

impl From<FrameMsg> for SensorFrame {
    fn from(m: FrameMsg) -> Self {
        SensorFrame {
            tick: m.tick,
            time: m.time,
            imu: ImuSample {
                a_x: m.imu.ax,
                a_y: m.imu.ay,
                a_z: m.imu.az,
                psi: m.imu.psi,
                psi_dot: m.imu.psi_dot,
            },
            odom: OdomSample {
                v_x: m.odom.vx,
                v_y: m.odom.vy,
                psi_dot: m.odom.psi_dot,
            },
            scan: m.scan,
            pose: m.pose,
        }
    }
}

pub fn encode_frame(frame: &SensorFrame) -> String {
    Message::Frame(frame.into()).encode()
}

pub fn decode_frame(line: &str) -> Result<SensorFrame, ProtocolError> {
    match Message::decode(line)? {
        Message::Frame(f) => Ok(f.into()),
        other => Err(ProtocolError::Unexpected {
            expected: "frame",
            got: other.kind(),
        }),
    }
}

pub fn encode_command(cmd: &Command) -> String {
    Message::Cmd(CmdMsg {
        tick: cmd.tick,
        a: cmd.a,
        delta: cmd.delta,
    })
    .encode()
}

pub fn decode_command(line: &str) -> Result<Command, ProtocolError> {
    match Message::decode(line)? {
        Message::Cmd(c) => Ok(Command {
            tick: c.tick,
            a: c.a,
            delta: c.delta,
        }),
        other => Err(ProtocolError::Unexpected {
            expected: "cmd",
            got: other.kind(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeoutPolicy {
    /// Reuse the last applied command.
    #[default]
    Hold,
    /// Apply a zero command.
    Zero,
    /// End the session.
    Abort,
}

impl std::str::FromStr for TimeoutPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hold" => Ok(Self::Hold),
            "zero" => Ok(Self::Zero),
            "abort" => Ok(Self::Abort),
            _ => Err(format!(
                "unknown timeout policy {s:?} (expected hold, zero or abort)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeConfig {
    /// How long to wait for each command; `None` waits indefinitely.
    pub timeout: Option<Duration>,
    pub on_timeout: TimeoutPolicy,
    /// Stop after this many ticks have been applied.
    pub max_ticks: Option<u64>,
    /// Sleep so that ticks are not applied faster than real time.
    pub wall_clock: bool,
    /// Store scans in the run log.
    pub log_scans: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEnd {
    /// `max_ticks` reached.
    Completed,
    /// Client closed the connection.
    Disconnected,
    ProtocolError(String),
    TimeoutAbort {
        tick: u64,
    },
    DynamicsFailure(String),
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub log: RunLog,
    pub end: SessionEnd,
    pub frames_sent: u64,
    pub timeouts: u64,
}

impl SessionReport {
    pub fn is_clean(&self) -> bool {
        matches!(self.end, SessionEnd::Completed | SessionEnd::Disconnected)
    }
}

/// Accepts one client on `listener` and runs a session with it.
pub fn serve(listener: &TcpListener, world: World, cfg: &ServeConfig) -> io::Result<SessionReport> {
    let (stream, peer) = listener.accept()?;
    log::info!("client connected from {peer}");
    serve_stream(stream, world, cfg)
}

enum Incoming {
    Line(String),
    Closed,
}

pub fn serve_stream(
    stream: TcpStream,
    mut world: World,
    cfg: &ServeConfig,
) -> io::Result<SessionReport> {
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel::<Incoming>();
    let reader_stream = stream.try_clone()?;
    let reader = std::thread::spawn(move || {
        let mut reader = BufReader::new(reader_stream);
        let mut line = String::new();
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Incoming::Closed);
                    return;
                }
                Ok(_) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(Incoming::Line(line.clone())).is_err() {
                        return;
                    }
                }
            }
        }
    });
    let mut writer = BufWriter::new(stream.try_clone()?);

    let mut log = RunLog::default();
    let mut last_cmd = ControlInput::default();
    let mut timed_out: Vec<u64> = Vec::new();
    let mut frames_sent = 0u64;
    let mut timeouts = 0u64;
    let started = Instant::now();
    let dt = world.config().dt;
    let mut frame = world.frame();

    let end = loop {
        if cfg.max_ticks.is_some_and(|m| log.records.len() as u64 >= m) {
            break SessionEnd::Completed;
        }
        let tick = frame.tick;
        if writer
            .write_all(encode_frame(&frame).as_bytes())
            .and_then(|_| writer.flush())
            .is_err()
        {
            break SessionEnd::Disconnected;
        }
        frames_sent += 1;

        let mut reset = None;
        let applied = loop {
            let msg = match cfg.timeout {
                Some(t) => match rx.recv_timeout(t) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => Some(Incoming::Closed),
                },
                None => Some(rx.recv().unwrap_or(Incoming::Closed)),
            };
            let line = match msg {
                None => {
                    timeouts += 1;
                    timed_out.push(tick);
                    log::warn!("no command for tick {tick} within timeout");
                    match cfg.on_timeout {
                        TimeoutPolicy::Hold => break Ok(last_cmd),
                        TimeoutPolicy::Zero => break Ok(ControlInput::default()),
                        TimeoutPolicy::Abort => break Err(SessionEnd::TimeoutAbort { tick }),
                    }
                }
                Some(Incoming::Closed) => break Err(SessionEnd::Disconnected),
                Some(Incoming::Line(l)) => l,
            };
            match Message::decode(&line) {
                Ok(Message::Cmd(c)) if c.tick == tick => break Ok(ControlInput::new(c.a, c.delta)),
                Ok(Message::Cmd(c)) if timed_out.contains(&c.tick) => {
                    log::debug!("dropping late command for tick {}", c.tick);
                }
                Ok(Message::Cmd(c)) => {
                    break Err(SessionEnd::ProtocolError(format!(
                        "tick mismatch: expected {tick}, got {}",
                        c.tick
                    )))
                }
                Ok(Message::Reset(r)) => {
                    reset = Some(r.pose);
                    break Ok(ControlInput::default());
                }
                Ok(Message::Frame(_)) => {
                    break Err(SessionEnd::ProtocolError(
                        "unexpected frame message from client".into(),
                    ))
                }
                Err(e) => break Err(SessionEnd::ProtocolError(e.to_string())),
            }
        };
        let cmd = match applied {
            Ok(c) => c,
            Err(end) => break end,
        };
        if let Some(pose) = reset {
            world.reset_ego(pose);
        }
        log.records.push(LogRecord {
            tick,
            time: frame.time,
            ground_truth: *world.ego(),
            estimate: None,
            cmd,
            reset,
            scan: if cfg.log_scans {
                frame.scan.take()
            } else {
                None
            },
            collision: world.in_collision(),
        });
        last_cmd = cmd;

        if cfg.wall_clock {
            let due = started + Duration::from_secs_f64((tick + 1) as f64 * dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        frame = match world.step(&cmd) {
            Ok(f) => f,
            Err(e) => break SessionEnd::DynamicsFailure(e.to_string()),
        };
    };
    let _ = writer.flush();
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = reader.join();
    match &end {
        SessionEnd::Completed | SessionEnd::Disconnected => {
            log::info!("session ended ({end:?}) after {} ticks", log.records.len())
        }
        _ => log::error!("session aborted: {end:?}"),
    }
    Ok(SessionReport {
        log,
        end,
        frames_sent,
        timeouts,
    })
}

/// Blocking lockstep client.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    line: String,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            line: String::new(),
        })
    }

    /// Next frame, or `None` once the server closes the session.
    pub fn recv_frame(&mut self) -> Result<Option<SensorFrame>, BridgeError> {
        loop {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => return Ok(None),
                Ok(_) if self.line.trim().is_empty() => continue,
                Ok(_) => return Ok(Some(decode_frame(&self.line)?)),
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn send_command(&mut self, cmd: &Command) -> io::Result<()> {
        self.writer.write_all(encode_command(cmd).as_bytes())?;
        self.writer.flush()
    }

    pub fn send_reset(&mut self, pose: Pose2) -> io::Result<()> {
        self.writer
            .write_all(Message::Reset(ResetMsg { pose }).encode().as_bytes())?;
        self.writer.flush()
    }
}

/// One replayable client action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Cmd(Command),
    Reset { tick: u64, pose: Pose2 },
}

impl Action {
    pub fn tick(&self) -> u64 {
        match self {
            Action::Cmd(c) => c.tick,
            Action::Reset { tick, .. } => *tick,
        }
    }
}

/// Client actions recorded in a run log, one per tick.
pub fn actions_from_log(log: &RunLog) -> Vec<Action> {
    log.records
        .iter()
        .map(|r| match r.reset {
            Some(pose) => Action::Reset { tick: r.tick, pose },
            None => Action::Cmd(Command {
                tick: r.tick,
                a: r.cmd.a,
                delta: r.cmd.delta,
            }),
        })
        .collect()
}

/// Replays recorded actions against a server, then disconnects. Returns
/// the number of frames received.
pub fn replay_client(actions: &[Action], addr: impl ToSocketAddrs) -> Result<u64, BridgeError> {
    let first = match actions.first() {
        None => return Ok(0),
        Some(a) => a.tick(),
    };
    for (k, a) in actions.iter().enumerate() {
        let expected = first + k as u64;
        if a.tick() != expected {
            return Err(BridgeError::TickGap {
                expected,
                found: a.tick(),
            });
        }
    }
    let mut client = Client::connect(addr)?;
    let mut frames = 0;
    let mut next = 0usize;
    while next < actions.len() {
        let Some(frame) = client.recv_frame()? else {
            break;
        };
        frames += 1;
        let action = &actions[next];
        if frame.tick != action.tick() {
            continue;
        }
        match action {
            Action::Cmd(c) => client.send_command(c)?,
            Action::Reset { pose, .. } => client.send_reset(*pose)?,
        }
        next += 1;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame(beams: usize) -> SensorFrame {
        SensorFrame {
            tick: 17,
            time: 0.17,
            imu: ImuSample {
                a_x: 0.1,
                a_y: -0.2,
                a_z: 9.81,
                psi: 0.3,
                psi_dot: 0.01,
            },
            odom: OdomSample {
                v_x: 1.5,
                v_y: 0.0,
                psi_dot: 0.01,
            },
            scan: Some(ScanPayload {
                fov: 4.71238898038469,
                ranges: (0..beams)
                    .map(|i| {
                        if i % 7 == 0 {
                            11.0
                        } else {
                            0.06 + i as f64 * 0.0091
                        }
                    })
                    .collect(),
            }),
            pose: Some(Pose2::new(1.0 / 3.0, -2.5, 2.9)),
        }
    }

    #[test]
    fn frame_round_trip() {
        let f = sample_frame(1081);
        assert_eq!(decode_frame(&encode_frame(&f)).unwrap(), f);
        let mut bare = f.clone();
        bare.scan = None;
        bare.pose = None;
        let line = encode_frame(&bare);
        assert!(!line.contains("scan") && !line.contains("pose"));
        assert!(line.ends_with('\n'));
        assert_eq!(decode_frame(&line).unwrap(), bare);
    }

    #[test]
    fn command_wire_format() {
        let c = Command {
            tick: 3,
            a: 1.25,
            delta: -0.1,
        };
        let line = encode_command(&c);
        assert_eq!(
            line,
            "{\"type\":\"cmd\",\"tick\":3,\"a\":1.25,\"delta\":-0.1}\n"
        );
        assert_eq!(decode_command(&line).unwrap(), c);
    }

    #[test]
    fn missing_field_is_named() {
        let err = decode_command("{\"type\":\"cmd\",\"tick\":3,\"a\":1.0}").unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn reset_message() {
        let m =
            Message::decode("{\"type\":\"reset\",\"pose\":{\"x\":1,\"y\":2,\"psi\":0.5}}").unwrap();
        assert_eq!(
            m,
            Message::Reset(ResetMsg {
                pose: Pose2::new(1.0, 2.0, 0.5)
            })
        );
    }

    #[test]
    fn replay_preflight() {
        assert_eq!(replay_client(&[], "127.0.0.1:1").unwrap(), 0);
        let actions: Vec<Action> = (0..10u64)
            .filter(|t| *t != 7)
            .map(|t| {
                Action::Cmd(Command {
                    tick: t,
                    a: 0.0,
                    delta: 0.0,
                })
            })
            .collect();
        match replay_client(&actions, "127.0.0.1:1") {
            Err(BridgeError::TickGap { expected, found }) => assert_eq!((expected, found), (7, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
