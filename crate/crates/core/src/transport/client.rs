//! Client side: single-threaded request/response loop.

use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{read_frame, write_frame, FrameError};
use super::message::{Hello, Message, PROTOCOL_VERSION};
use super::{TransportError, BYE_HASH_MISMATCH};
use crate::eval::MetricsReport;
use crate::federation::{ClientState, Contribution, RoundPlan, SecureAggregation, TrainingSchedule};
use crate::model::ModelSpec;

/// Everything a client process needs to take part in a run.
#[derive(Debug, Clone)]
pub struct ClientSession {
    pub client: ClientState,
    pub spec: ModelSpec,
    pub schedule: TrainingSchedule,
    pub secure: Option<SecureAggregation>,
    pub seed: u64,
    pub config_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    /// Rounds this client contributed to.
    pub rounds_participated: u32,
    /// Round reports received.
    pub rounds_completed: u32,
    pub last_metrics: Option<MetricsReport>,
}

fn connect(addr: SocketAddr, patience: Duration) -> Result<TcpStream, TransportError> {
    let deadline = Instant::now() + patience;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn reply(session: &ClientSession, contribution: Contribution) -> Message {
    match contribution {
        Contribution::Plain(u) => Message::ClientUpdate {
            summary: (&u).into(),
            params: u.params,
        },
        Contribution::Masked { summary, share } => Message::MaskedShare {
            summary,
            words: share.masked_values,
        },
        Contribution::Withheld(summary) => Message::ClientUpdate {
            summary,
            params: crate::ParamVector::zeros(session.spec.param_dim()),
        },
    }
}

/// Connect to `addr` (retrying for up to `patience`), register, and serve
/// rounds until the server says goodbye.
pub fn join(addr: SocketAddr, session: &ClientSession, patience: Duration) -> Result<JoinOutcome, TransportError> {
    let id = session.client.client_id;
    let mut stream = connect(addr, patience)?;
    stream.set_nodelay(true)?;
    let hello = Message::Hello(Hello {
        version: PROTOCOL_VERSION,
        config_hash: session.config_hash,
        sample_count: session.client.data.len() as u64,
    });
    write_frame(&mut stream, &hello.to_frame(0, id)?)?;

    let mut registered = false;
    let mut last_abort: Option<String> = None;
    let mut outcome = JoinOutcome { rounds_participated: 0, rounds_completed: 0, last_metrics: None };
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(FrameError::Closed) | Err(FrameError::Truncated) => {
                return Err(match last_abort {
                    Some(reason) => TransportError::Aborted(reason),
                    None => TransportError::Protocol("server closed the connection".into()),
                })
            }
            Err(e) => return Err(e.into()),
        };
        match Message::from_frame(&frame)? {
            Message::Hello(h) if !registered => {
                if h.config_hash != session.config_hash {
                    return Err(TransportError::ConfigMismatch("server announced a different config".into()));
                }
                log::info!("client {id} registered");
                registered = true;
            }
            Message::Bye(reason) if !registered => {
                return Err(if reason == BYE_HASH_MISMATCH {
                    TransportError::ConfigMismatch(reason)
                } else {
                    TransportError::Rejected(reason)
                });
            }
            Message::Bye(reason) => {
                log::info!("client {id} finished: {reason}");
                return Ok(outcome);
            }
            Message::GlobalModel(g) if registered => {
                let plan = RoundPlan {
                    round: frame.round,
                    learning_rate: g.learning_rate,
                    participants: g.participants,
                    coefficients: g.coefficients,
                };
                let contribution = session.client.contribute(
                    &session.spec,
                    &g.theta,
                    &session.schedule,
                    &plan,
                    session.secure.as_ref(),
                    session.seed,
                )?;
                write_frame(&mut stream, &reply(session, contribution).to_frame(frame.round, id)?)?;
                outcome.rounds_participated += 1;
            }
            Message::RoundReport(m) if registered => {
                log::debug!("client {id}: round {} accuracy {:.4}", frame.round, m.accuracy);
                outcome.rounds_completed = frame.round;
                outcome.last_metrics = Some(m);
            }
            Message::Abort(reason) => {
                log::warn!("client {id}: server aborted round {}: {reason}", frame.round);
                last_abort = Some(reason);
            }
            other => {
                return Err(TransportError::Protocol(format!(
                    "unexpected {:?} from server",
                    other.msg_type()
                )))
            }
        }
    }
}
