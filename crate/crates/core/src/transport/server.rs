//! Server side: one reader thread per connection feeding a channel, and a
//! single round state machine (broadcast, collect, aggregate) on the caller's
//! thread.

use std::collections::{BTreeMap, HashMap};
use std::io::ErrorKind;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{read_frame, write_frame, Frame, FrameError, MessageType};
use super::message::{GlobalModel, Hello, Message, PROTOCOL_VERSION};
use super::{
    TransportError, BYE_DONE, BYE_DUPLICATE, BYE_HASH_MISMATCH, BYE_UNKNOWN, BYE_VERSION_MISMATCH,
};
use crate::eval::RoundReport;
use crate::federation::{self, ClientUpdate, Contribution, Coordinator, FederationError, RoundPlan, UpdateSummary};
use crate::secure_sum::MaskedShare;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub config_hash: [u8; 32],
    pub expected_clients: u32,
    /// Bound on the registration phase and on each collect phase.
    pub timeout: Duration,
}

#[derive(Debug)]
pub struct ServeOutcome {
    pub coordinator: Coordinator,
    pub reports: Vec<RoundReport>,
}

enum Event {
    Connected(usize, TcpStream),
    Frame(usize, Frame),
    Failed(usize, FrameError),
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next = 0usize;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let conn = next;
                next += 1;
                log::debug!("connection {conn} from {peer}");
                let writer = match stream.set_nonblocking(false).and_then(|_| stream.try_clone()) {
                    Ok(w) => w,
                    Err(e) => {
                        log::warn!("dropping connection from {peer}: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                if tx.send(Event::Connected(conn, writer)).is_err() {
                    return;
                }
                let tx = tx.clone();
                thread::spawn(move || read_loop(conn, stream, tx));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn read_loop(conn: usize, mut stream: TcpStream, tx: Sender<Event>) {
    loop {
        let event = match read_frame(&mut stream) {
            Ok(frame) => Event::Frame(conn, frame),
            Err(e) => {
                let _ = tx.send(Event::Failed(conn, e));
                return;
            }
        };
        if tx.send(event).is_err() {
            return;
        }
    }
}

struct Server {
    opts: ServerOptions,
    rx: Receiver<Event>,
    stop: Arc<AtomicBool>,
    conns: HashMap<usize, TcpStream>,
    client_of: HashMap<usize, u32>,
    conn_of: BTreeMap<u32, usize>,
    sample_counts: BTreeMap<u32, u64>,
}

enum Collected {
    Done(Vec<Contribution>),
    Failed(String),
}

impl Server {
    fn send(&mut self, conn: usize, msg: &Message, round: u32, client_id: u32) {
        let Some(stream) = self.conns.get_mut(&conn) else { return };
        let sent = msg
            .to_frame(round, client_id)
            .map_err(TransportError::from)
            .and_then(|f| write_frame(stream, &f).map_err(TransportError::from));
        if let Err(e) = sent {
            log::warn!("send to connection {conn} failed: {e}");
        }
    }

    fn drop_conn(&mut self, conn: usize) {
        if let Some(stream) = self.conns.remove(&conn) {
            let _ = stream.shutdown(Shutdown::Write);
        }
        if let Some(id) = self.client_of.remove(&conn) {
            self.conn_of.remove(&id);
            log::warn!("client {id} disconnected");
        }
    }

    fn say_bye(&mut self, conn: usize, reason: &str, client_id: u32) {
        self.send(conn, &Message::Bye(reason.into()), 0, client_id);
        self.drop_conn(conn);
    }

    fn broadcast(&mut self, msg: &Message, round: u32) {
        let targets: Vec<(u32, usize)> = self.conn_of.iter().map(|(&id, &c)| (id, c)).collect();
        for (id, conn) in targets {
            self.send(conn, msg, round, id);
        }
    }

    fn next_event(&self, deadline: Instant) -> Option<Event> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(wait) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    /// Handle connection-level events common to every phase. Returns the
    /// frame of a registered client, if the event carried one.
    fn handle(&mut self, ev: Event) -> Result<Option<(u32, Frame)>, TransportError> {
        match ev {
            Event::Connected(conn, stream) => {
                self.conns.insert(conn, stream);
                Ok(None)
            }
            Event::Failed(conn, e) => {
                if let FrameError::Oversize(n) = e {
                    let id = self.client_of.get(&conn).copied().unwrap_or(0);
                    self.send(conn, &Message::Abort(format!("frame of {n} bytes is too large")), 0, id);
                } else if !matches!(e, FrameError::Closed) {
                    log::warn!("connection {conn}: {e}");
                }
                self.drop_conn(conn);
                Ok(None)
            }
            Event::Frame(conn, frame) if frame.msg_type == MessageType::Hello => {
                self.register(conn, &frame)?;
                Ok(None)
            }
            Event::Frame(conn, frame) => match self.client_of.get(&conn) {
                Some(&id) => Ok(Some((id, frame))),
                None => {
                    log::warn!("connection {conn} sent {:?} before HELLO", frame.msg_type);
                    self.drop_conn(conn);
                    Ok(None)
                }
            },
        }
    }

    fn register(&mut self, conn: usize, frame: &Frame) -> Result<(), TransportError> {
        let id = frame.client_id;
        let hello = match Message::from_frame(frame) {
            Ok(Message::Hello(h)) => h,
            _ => {
                self.drop_conn(conn);
                return Ok(());
            }
        };
        if self.client_of.contains_key(&conn) {
            log::warn!("client {id} sent a second HELLO");
            return Ok(());
        }
        if hello.version != PROTOCOL_VERSION {
            log::warn!("client {id} speaks protocol version {}", hello.version);
            self.say_bye(conn, BYE_VERSION_MISMATCH, id);
            return Ok(());
        }
        if hello.config_hash != self.opts.config_hash {
            self.say_bye(conn, BYE_HASH_MISMATCH, id);
            return Err(TransportError::ConfigMismatch(format!("client {id} runs a different config")));
        }
        if id >= self.opts.expected_clients {
            self.say_bye(conn, BYE_UNKNOWN, id);
            return Ok(());
        }
        if self.conn_of.contains_key(&id) || self.sample_counts.contains_key(&id) {
            log::warn!("rejecting second connection for client {id}");
            self.say_bye(conn, BYE_DUPLICATE, id);
            return Ok(());
        }
        self.client_of.insert(conn, id);
        self.conn_of.insert(id, conn);
        self.sample_counts.insert(id, hello.sample_count);
        let ack = Message::Hello(Hello {
            version: PROTOCOL_VERSION,
            config_hash: self.opts.config_hash,
            sample_count: 0,
        });
        self.send(conn, &ack, 0, id);
        log::info!("client {id} joined with {} samples", hello.sample_count);
        Ok(())
    }

    fn await_clients(&mut self) -> Result<Vec<u64>, TransportError> {
        let deadline = Instant::now() + self.opts.timeout;
        while self.conn_of.len() < self.opts.expected_clients as usize {
            let Some(ev) = self.next_event(deadline) else {
                return Err(TransportError::Timeout(format!(
                    "{} of {} clients joined",
                    self.conn_of.len(),
                    self.opts.expected_clients
                )));
            };
            if let Some((id, frame)) = self.handle(ev)? {
                log::warn!("ignoring {:?} from client {id} before the first round", frame.msg_type);
            }
            // A client that left during registration may come back.
            let live: Vec<u32> = self.conn_of.keys().copied().collect();
            self.sample_counts.retain(|id, _| live.contains(id));
        }
        Ok(self.sample_counts.values().copied().collect())
    }

    fn contribution(&self, secure: bool, round: u32, id: u32, msg: Message) -> Option<Contribution> {
        match msg {
            Message::ClientUpdate { summary, params } => Some(if secure {
                Contribution::Withheld(summary)
            } else {
                Contribution::Plain(ClientUpdate {
                    client_id: id,
                    round,
                    params,
                    sample_count: summary.sample_count,
                    loss_before: summary.loss_before,
                    loss_after: summary.loss_after,
                    receipt: summary.receipt,
                    flagged: summary.flagged,
                })
            }),
            Message::MaskedShare { summary, words } => Some(Contribution::Masked {
                summary,
                share: MaskedShare { client_id: id, round, masked_values: words },
            }),
            _ => None,
        }
    }

    fn collect(&mut self, co: &Coordinator, plan: &RoundPlan) -> Result<Collected, TransportError> {
        let round = plan.round;
        if let Some(missing) = plan.participants.iter().find(|id| !self.conn_of.contains_key(id)) {
            return Ok(Collected::Failed(format!("client {missing} is not connected")));
        }
        let model = Message::GlobalModel(GlobalModel {
            theta: co.theta().clone(),
            learning_rate: plan.learning_rate,
            participants: plan.participants.clone(),
            coefficients: plan.coefficients.clone(),
        });
        for &id in &plan.participants {
            let conn = self.conn_of[&id];
            self.send(conn, &model, round, id);
        }

        let deadline = Instant::now() + self.opts.timeout;
        let mut got: BTreeMap<u32, Contribution> = BTreeMap::new();
        while got.len() < plan.participants.len() {
            let Some(ev) = self.next_event(deadline) else {
                let waiting: Vec<u32> =
                    plan.participants.iter().copied().filter(|id| !got.contains_key(id)).collect();
                return Ok(Collected::Failed(format!("timed out waiting for clients {waiting:?}")));
            };
            let Some((id, frame)) = self.handle(ev)? else {
                if let Some(gone) = plan
                    .participants
                    .iter()
                    .find(|id| !got.contains_key(id) && !self.conn_of.contains_key(id))
                {
                    return Ok(Collected::Failed(format!("client {gone} disconnected")));
                }
                continue;
            };
            if frame.round != round || frame.client_id != id || !plan.participants.contains(&id) {
                log::warn!(
                    "ignoring {:?} for round {} from client {id} in round {round}",
                    frame.msg_type,
                    frame.round
                );
                continue;
            }
            let decoded = Message::from_frame(&frame)
                .ok()
                .and_then(|m| self.contribution(co.secure.is_some(), round, id, m));
            match decoded {
                Some(c) if !got.contains_key(&id) => {
                    got.insert(id, c);
                }
                Some(_) => log::warn!("ignoring repeated update from client {id}"),
                None => {
                    let conn = self.conn_of[&id];
                    self.drop_conn(conn);
                    return Ok(Collected::Failed(format!("malformed update from client {id}")));
                }
            }
        }
        Ok(Collected::Done(got.into_values().collect()))
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for (_, stream) in self.conns.drain() {
            let _ = stream.shutdown(Shutdown::Write);
        }
        self.client_of.clear();
        self.conn_of.clear();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Accept `expected_clients` registrations on `listener`, build the
/// coordinator from the announced sample counts, then run every scheduled
/// round. A round that fails is retried once; a second failure sends ABORT to
/// every client and returns the error.
pub fn serve<F>(listener: TcpListener, opts: ServerOptions, build: F) -> Result<ServeOutcome, TransportError>
where
    F: FnOnce(&[u64]) -> Result<Coordinator, FederationError>,
{
    if opts.expected_clients == 0 {
        return Err(FederationError::Invalid("no clients".into()).into());
    }
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, stop));
    }
    let mut server = Server {
        opts,
        rx,
        stop,
        conns: HashMap::new(),
        client_of: HashMap::new(),
        conn_of: BTreeMap::new(),
        sample_counts: BTreeMap::new(),
    };

    let sizes = server.await_clients()?;
    let mut co = build(&sizes)?;
    let mut reports = Vec::new();
    while co.completed_rounds() < co.schedule.rounds {
        let round = co.completed_rounds() + 1;
        let plan = co.plan_round(round)?;
        let mut failure = String::new();
        let mut committed = None;
        for attempt in 1..=2 {
            let outcome = match server.collect(&co, &plan)? {
                Collected::Done(contributions) => federation::combine(&co, &plan, &contributions)
                    .map(|theta| (theta, contributions))
                    .map_err(|e| e.to_string()),
                Collected::Failed(reason) => Err(reason),
            };
            match outcome {
                Ok(ok) => {
                    committed = Some(ok);
                    break;
                }
                Err(reason) => {
                    log::warn!("round {round} attempt {attempt} failed: {reason}");
                    failure = reason;
                }
            }
        }
        let Some((theta, contributions)) = committed else {
            server.broadcast(&Message::Abort(failure.clone()), round);
            return Err(FederationError::RoundAborted { round, reason: failure }.into());
        };
        let summaries: Vec<UpdateSummary> = contributions.iter().map(Contribution::summary).collect();
        let report = co.commit(&plan, theta, &summaries)?;
        server.broadcast(&Message::RoundReport(report.metrics), round);
        log::info!("round {round}: accuracy {:.4}", report.metrics.accuracy);
        reports.push(report);
    }
    server.broadcast(&Message::Bye(BYE_DONE.into()), co.completed_rounds());
    server.shutdown();
    Ok(ServeOutcome { coordinator: co, reports })
}
