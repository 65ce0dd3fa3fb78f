//! One aggregation pipeline, reused by every round of a run.
//!
//! Each round is a barrier: all N uploads, then one aggregate, then one
//! broadcast. In the networked transports the cloud and the security module
//! are single-threaded handlers on their own threads; the orchestrator plays
//! the parties, each over its own connection.

use std::collections::BTreeSet;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::paillier::{Ciphertext, EncryptedVector, FixedPointCodec, PrivateKey, PublicKey};

use super::roles::{check_range, CloudServer, SecurityModule};
use super::wire::{self, ChannelOutbox, Inbox, Outbox};
use super::{MessageKind, MessageLog, Payload, ProtocolError, Result, Role, RoundMessage};

pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// Direct calls into the role objects on the caller's thread.
    Direct,
    /// Role handlers on threads, connected by in-process channels.
    Channel,
    /// Role handlers on threads, connected by loopback TCP.
    Socket,
}

#[derive(Debug, Clone)]
pub struct EncryptedMode {
    pub public: PublicKey,
    pub private: PrivateKey,
    pub codec: FixedPointCodec,
    pub transport: Transport,
    /// Per-round barrier timeout in the networked transports.
    pub timeout: Duration,
    /// Seeds the parties' encryption randomness; `None` draws from the OS.
    pub rng_seed: Option<u64>,
}

impl EncryptedMode {
    pub fn new(private: PrivateKey, scale_bits: u32, transport: Transport) -> Self {
        let public = private.public_key().clone();
        let codec = FixedPointCodec::new(&public, scale_bits);
        Self { public, private, codec, transport, timeout: DEFAULT_ROUND_TIMEOUT, rng_seed: None }
    }
}

#[derive(Debug, Clone)]
pub enum Mode {
    Plaintext,
    Encrypted(EncryptedMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeTag {
    Plaintext,
    EncryptedDirect,
    EncryptedChannel,
    EncryptedSocket,
}

impl Mode {
    pub fn tag(&self) -> ModeTag {
        match self {
            Mode::Plaintext => ModeTag::Plaintext,
            Mode::Encrypted(e) => match e.transport {
                Transport::Direct => ModeTag::EncryptedDirect,
                Transport::Channel => ModeTag::EncryptedChannel,
                Transport::Socket => ModeTag::EncryptedSocket,
            },
        }
    }
}

impl std::fmt::Display for ModeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModeTag::Plaintext => "plaintext",
            ModeTag::EncryptedDirect => "encrypted-direct",
            ModeTag::EncryptedChannel => "encrypted-inproc",
            ModeTag::EncryptedSocket => "encrypted-socket",
        })
    }
}

/// Which pipeline a round uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Vector,
    Scalar,
}

impl Shape {
    fn upload_kind(self) -> MessageKind {
        match self {
            Shape::Vector => MessageKind::PartyUpload,
            Shape::Scalar => MessageKind::ScalarUpload,
        }
    }

    fn broadcast_kind(self) -> MessageKind {
        match self {
            Shape::Vector => MessageKind::Broadcast,
            Shape::Scalar => MessageKind::ScalarBroadcast,
        }
    }
}

/// Party-side encryption state.
struct PartyCipher {
    id: usize,
    rng: ChaCha20Rng,
}

struct Encrypted {
    public: PublicKey,
    codec: FixedPointCodec,
    ciphers: Vec<PartyCipher>,
}

impl Encrypted {
    /// Encrypts every present upload, in parallel across parties.
    fn uploads(&mut self, k: u64, values: &[Option<Vec<f64>>], shape: Shape) -> Result<Vec<Option<RoundMessage>>> {
        let count = values.len();
        let (public, codec) = (&self.public, &self.codec);
        self.ciphers
            .par_iter_mut()
            .zip(values.par_iter())
            .map(|(cipher, v)| {
                let Some(v) = v else { return Ok(None) };
                check_range(codec, v, count)?;
                let payload = match shape {
                    Shape::Vector => Payload::Ciphertexts(public.encrypt_vector(codec, v, &mut cipher.rng)?),
                    Shape::Scalar => {
                        let m = codec.encode(v[0])?;
                        Payload::Ciphertext(public.encrypt(&m, &mut cipher.rng)?)
                    }
                };
                Ok(Some(RoundMessage::new(shape.upload_kind(), k, Role::Party(cipher.id), payload)))
            })
            .collect()
    }
}

enum Runtime {
    Plain,
    Direct { enc: Encrypted, cloud: CloudServer, security: SecurityModule },
    Networked { enc: Encrypted, net: Network },
}

/// Party-side connections plus the role handler threads.
struct Network {
    outboxes: Vec<Box<dyn Outbox>>,
    inboxes: Vec<Inbox>,
    handles: Vec<JoinHandle<Result<()>>>,
    timeout: Duration,
}

impl Network {
    fn shutdown(&mut self) -> Option<ProtocolError> {
        self.outboxes.clear();
        let mut first = None;
        for h in self.handles.drain(..) {
            let outcome = h.join().unwrap_or_else(|_| Err(ProtocolError::Config("role handler panicked".into())));
            if let (Err(e), None) = (outcome, &first) {
                first = Some(e);
            }
        }
        first
    }
}

/// Runs the encrypt, aggregate, decrypt, divide pipeline for one party set.
pub struct Session {
    party_ids: Vec<usize>,
    runtime: Runtime,
    log: MessageLog,
    tag: ModeTag,
    failed: Option<ProtocolError>,
    scalar_round: u64,
}

impl Session {
    pub fn new(mode: &Mode, party_ids: &[usize], log: MessageLog) -> Result<Self> {
        if party_ids.is_empty() {
            return Err(ProtocolError::Config("at least one party is required".into()));
        }
        if party_ids.iter().collect::<BTreeSet<_>>().len() != party_ids.len() {
            return Err(ProtocolError::Config("party ids must be unique".into()));
        }
        let runtime = match mode {
            Mode::Plaintext => Runtime::Plain,
            Mode::Encrypted(e) => {
                if e.private.public_key() != &e.public || e.codec.modulus() != e.public.n() {
                    return Err(ProtocolError::Config("keys and codec do not belong together".into()));
                }
                let ciphers = party_ids
                    .iter()
                    .map(|&id| PartyCipher {
                        id,
                        rng: match e.rng_seed {
                            Some(seed) => {
                                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                                rng.set_stream(id as u64);
                                rng
                            }
                            None => ChaCha20Rng::from_os_rng(),
                        },
                    })
                    .collect();
                let enc = Encrypted { public: e.public.clone(), codec: e.codec.clone(), ciphers };
                let cloud = CloudServer::new(e.public.clone());
                let security = SecurityModule::new(e.private.clone(), e.codec.clone());
                match e.transport {
                    Transport::Direct => Runtime::Direct { enc, cloud, security },
                    Transport::Channel => {
                        Runtime::Networked { enc, net: connect_channels(cloud, security, party_ids, e.timeout, &log)? }
                    }
                    Transport::Socket => {
                        Runtime::Networked { enc, net: connect_sockets(cloud, security, party_ids, e.timeout, &log)? }
                    }
                }
            }
        };
        Ok(Self { party_ids: party_ids.to_vec(), runtime, log, tag: mode.tag(), failed: None, scalar_round: 0 })
    }

    pub fn mode(&self) -> ModeTag {
        self.tag
    }

    pub fn parties(&self) -> usize {
        self.party_ids.len()
    }

    pub fn party_ids(&self) -> &[usize] {
        &self.party_ids
    }

    pub fn log(&self) -> &MessageLog {
        &self.log
    }

    pub fn codec(&self) -> Option<&FixedPointCodec> {
        match &self.runtime {
            Runtime::Plain => None,
            Runtime::Direct { enc, .. } | Runtime::Networked { enc, .. } => Some(&enc.codec),
        }
    }

    /// `(1/N)Σ values_i`, with `values` in party order.
    pub fn average(&mut self, k: u64, values: &[Vec<f64>]) -> Result<Vec<f64>> {
        let present: Vec<Option<Vec<f64>>> = values.iter().cloned().map(Some).collect();
        self.average_partial(k, &present)
    }

    /// Like [`Session::average`], but parties given as `None` never upload,
    /// so the barrier cannot complete and the round fails.
    pub fn average_partial(&mut self, k: u64, values: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
        self.run(k, values, Shape::Vector)
    }

    /// `(1/N)Σ values_i` of one scalar per party.
    pub fn average_scalar(&mut self, k: u64, values: &[f64]) -> Result<f64> {
        let present: Vec<Option<Vec<f64>>> = values.iter().map(|&v| Some(vec![v])).collect();
        Ok(self.run(k, &present, Shape::Scalar)?[0])
    }

    fn run(&mut self, k: u64, values: &[Option<Vec<f64>>], shape: Shape) -> Result<Vec<f64>> {
        if let Some(e) = &self.failed {
            return Err(ProtocolError::Aborted(Box::new(e.clone())));
        }
        if values.len() != self.party_ids.len() {
            return Err(ProtocolError::Config(format!(
                "{} values for {} parties",
                values.len(),
                self.party_ids.len()
            )));
        }
        let width = values.iter().flatten().map(Vec::len).next().unwrap_or(0);
        if width == 0 || values.iter().flatten().any(|v| v.len() != width) {
            return Err(ProtocolError::Config("uploads must be non-empty and of equal length".into()));
        }
        let outcome = self.dispatch(k, values, shape);
        if let (Err(e), Runtime::Networked { net, .. }) = (&outcome, &mut self.runtime) {
            // A networked failure leaves the handlers unusable; prefer the
            // handler's own diagnosis over the orchestrator's view of it.
            let cause = net.shutdown().unwrap_or_else(|| e.clone());
            self.failed = Some(cause.clone());
            return Err(cause);
        }
        outcome
    }

    fn dispatch(&mut self, k: u64, values: &[Option<Vec<f64>>], shape: Shape) -> Result<Vec<f64>> {
        let count = self.party_ids.len();
        let missing = || -> Vec<usize> {
            self.party_ids.iter().zip(values).filter(|(_, v)| v.is_none()).map(|(&id, _)| id).collect()
        };
        match &mut self.runtime {
            Runtime::Plain => {
                let missing = missing();
                if !missing.is_empty() {
                    return Err(ProtocolError::Timeout { k, missing });
                }
                let width = values[0].as_ref().map_or(0, Vec::len);
                let mut sum = vec![0.0; width];
                for (id, v) in self.party_ids.iter().zip(values.iter().flatten()) {
                    if self.log.is_enabled() {
                        let payload = match shape {
                            Shape::Vector => Payload::Vector(v.clone()),
                            Shape::Scalar => Payload::Scalar(v[0]),
                        };
                        self.log.record(&RoundMessage::new(shape.upload_kind(), k, Role::Party(*id), payload));
                    }
                    sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
                if self.log.is_enabled() {
                    self.log.record(&RoundMessage::new(
                        MessageKind::AggregateToSecurity,
                        k,
                        Role::Cloud,
                        Payload::Vector(sum),
                    ));
                    self.log.record(&broadcast(shape, k, mean.clone()));
                }
                Ok(mean)
            }
            Runtime::Direct { enc, cloud, security } => {
                let uploads = enc.uploads(k, values, shape)?;
                let missing = missing();
                if !missing.is_empty() {
                    return Err(ProtocolError::Timeout { k, missing });
                }
                let uploads: Vec<RoundMessage> = uploads.into_iter().flatten().collect();
                for u in &uploads {
                    self.log.record(u);
                }
                let aggregate = cloud_aggregate(cloud, k, &uploads, shape)?;
                self.log.record(&aggregate);
                let reply = security_reply(security, &aggregate, count)?;
                self.log.record(&reply);
                payload_values(&reply, shape)
            }
            Runtime::Networked { enc, net } => {
                let uploads = enc.uploads(k, values, shape)?;
                for (outbox, upload) in net.outboxes.iter_mut().zip(&uploads) {
                    if let Some(u) = upload {
                        self.log.record(u);
                        outbox.send(u)?;
                    }
                }
                // The cloud's own barrier fires first and reports the cause.
                let deadline = Instant::now() + net.timeout * 2;
                let mut fused: Option<Vec<f64>> = None;
                for inbox in &net.inboxes {
                    let msg = wire::recv_until(inbox, deadline)?;
                    expect(&msg, shape.broadcast_kind(), k)?;
                    let v = payload_values(&msg, shape)?;
                    match &fused {
                        None => fused = Some(v),
                        Some(f) if *f != v => {
                            return Err(ProtocolError::Protocol(format!("round {k}: parties received different broadcasts")))
                        }
                        Some(_) => {}
                    }
                }
                Ok(fused.expect("at least one party"))
            }
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Runtime::Networked { net, .. } = &mut self.runtime {
            if let Some(e) = net.shutdown() {
                log::debug!("role handler ended with: {e}");
            }
        }
    }
}

impl crate::design::ScalarAverager for Session {
    fn average(&mut self, values: &[f64]) -> Result<f64> {
        self.scalar_round += 1;
        self.average_scalar(self.scalar_round, values)
    }
}

fn broadcast(shape: Shape, k: u64, mean: Vec<f64>) -> RoundMessage {
    let payload = match shape {
        Shape::Vector => Payload::Vector(mean),
        Shape::Scalar => Payload::Scalar(mean[0]),
    };
    RoundMessage::new(shape.broadcast_kind(), k, Role::Security, payload)
}

fn expect(msg: &RoundMessage, kind: MessageKind, k: u64) -> Result<()> {
    if msg.kind != kind || msg.k != k {
        return Err(ProtocolError::Protocol(format!(
            "expected {kind:?} for round {k}, got {:?} for round {}",
            msg.kind, msg.k
        )));
    }
    Ok(())
}

fn payload_values(msg: &RoundMessage, shape: Shape) -> Result<Vec<f64>> {
    match (&msg.payload, shape) {
        (Payload::Vector(v), Shape::Vector) => Ok(v.clone()),
        (Payload::Scalar(x), Shape::Scalar) => Ok(vec![*x]),
        _ => Err(ProtocolError::Protocol(format!("unexpected payload in {:?}", msg.kind))),
    }
}

/// Sums a complete set of uploads into one `AggregateToSecurity` message.
fn cloud_aggregate(cloud: &CloudServer, k: u64, uploads: &[RoundMessage], shape: Shape) -> Result<RoundMessage> {
    let payload = match shape {
        Shape::Vector => {
            let parts = uploads
                .iter()
                .map(|m| match &m.payload {
                    Payload::Ciphertexts(v) => Ok(v),
                    _ => Err(ProtocolError::Protocol("vector upload without ciphertexts".into())),
                })
                .collect::<Result<Vec<&EncryptedVector>>>()?;
            Payload::Ciphertexts(cloud.aggregate(&parts)?)
        }
        Shape::Scalar => {
            let parts = uploads
                .iter()
                .map(|m| match &m.payload {
                    Payload::Ciphertext(c) => Ok(c),
                    _ => Err(ProtocolError::Protocol("scalar upload without a ciphertext".into())),
                })
                .collect::<Result<Vec<&Ciphertext>>>()?;
            Payload::Ciphertext(cloud.aggregate_scalar(&parts)?)
        }
    };
    Ok(RoundMessage::new(MessageKind::AggregateToSecurity, k, Role::Cloud, payload))
}

/// Decrypts one aggregate into the matching broadcast.
fn security_reply(security: &SecurityModule, aggregate: &RoundMessage, parties: usize) -> Result<RoundMessage> {
    expect(aggregate, MessageKind::AggregateToSecurity, aggregate.k)?;
    match &aggregate.payload {
        Payload::Ciphertexts(v) => Ok(broadcast(Shape::Vector, aggregate.k, security.average(v, parties)?)),
        Payload::Ciphertext(c) => Ok(broadcast(Shape::Scalar, aggregate.k, vec![security.average_scalar(c, parties)?])),
        _ => Err(ProtocolError::Protocol("aggregate carries no ciphertext".into())),
    }
}

/// Cloud handler: waits for the first upload of a round, then gives the
/// remaining parties `timeout` to arrive.
fn cloud_loop(
    cloud: CloudServer,
    party_ids: Vec<usize>,
    inbox: Inbox,
    mut parties: Vec<Box<dyn Outbox>>,
    mut security: Box<dyn Outbox>,
    from_security: Inbox,
    timeout: Duration,
    log: MessageLog,
) -> Result<()> {
    loop {
        let first = match wire::recv(&inbox) {
            Ok(m) => m,
            Err(ProtocolError::Disconnected) => return Ok(()),
            Err(e) => return Err(e),
        };
        let (k, kind) = (first.k, first.kind);
        let shape = match kind {
            MessageKind::PartyUpload => Shape::Vector,
            MessageKind::ScalarUpload => Shape::Scalar,
            other => return Err(ProtocolError::Protocol(format!("cloud received {other:?} from a party"))),
        };
        let deadline = Instant::now() + timeout;
        let mut uploads = vec![first];
        while uploads.len() < party_ids.len() {
            match wire::recv_until(&inbox, deadline) {
                Ok(m) => {
                    expect(&m, kind, k)?;
                    uploads.push(m);
                }
                Err(ProtocolError::LinkTimeout | ProtocolError::Disconnected) => {
                    let seen: BTreeSet<Role> = uploads.iter().map(|m| m.sender).collect();
                    let missing = party_ids.iter().copied().filter(|&id| !seen.contains(&Role::Party(id))).collect();
                    return Err(ProtocolError::Timeout { k, missing });
                }
                Err(e) => return Err(e),
            }
        }
        let senders: BTreeSet<Role> = uploads.iter().map(|m| m.sender).collect();
        if senders.len() != party_ids.len() || party_ids.iter().any(|&id| !senders.contains(&Role::Party(id))) {
            return Err(ProtocolError::Protocol(format!("round {k}: uploads do not come from the registered parties")));
        }
        let aggregate = cloud_aggregate(&cloud, k, &uploads, shape)?;
        log.record(&aggregate);
        security.send(&aggregate)?;
        let reply = wire::recv_until(&from_security, Instant::now() + timeout)?;
        expect(&reply, shape.broadcast_kind(), k)?;
        for p in parties.iter_mut() {
            p.send(&reply)?;
        }
    }
}

/// Security handler: one aggregate in, one broadcast out.
fn security_loop(security: SecurityModule, parties: usize, inbox: Inbox, mut cloud: Box<dyn Outbox>, log: MessageLog) -> Result<()> {
    loop {
        let aggregate = match wire::recv(&inbox) {
            Ok(m) => m,
            Err(ProtocolError::Disconnected) => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = security_reply(&security, &aggregate, parties)?;
        log.record(&reply);
        cloud.send(&reply)?;
    }
}

type Endpoint = (Box<dyn Outbox>, Inbox);

#[allow(clippy::too_many_arguments)]
fn spawn_roles(
    cloud: CloudServer,
    security: SecurityModule,
    party_ids: &[usize],
    timeout: Duration,
    log: &MessageLog,
    cloud_inbox: Inbox,
    cloud_to_parties: Vec<Box<dyn Outbox>>,
    cloud_side_security: Endpoint,
    security_side: Endpoint,
) -> Result<Vec<JoinHandle<Result<()>>>> {
    let spawn_err = |e: std::io::Error| ProtocolError::Config(format!("cannot spawn role handler: {e}"));
    let ids = party_ids.to_vec();
    let count = ids.len();
    let (cloud_log, security_log) = (log.clone(), log.clone());
    let (to_security, from_security) = cloud_side_security;
    let (to_cloud, security_inbox) = security_side;
    let cloud_handle = std::thread::Builder::new()
        .name("cloud".into())
        .spawn(move || {
            cloud_loop(cloud, ids, cloud_inbox, cloud_to_parties, to_security, from_security, timeout, cloud_log)
        })
        .map_err(spawn_err)?;
    let security_handle = std::thread::Builder::new()
        .name("security".into())
        .spawn(move || security_loop(security, count, security_inbox, to_cloud, security_log))
        .map_err(spawn_err)?;
    Ok(vec![cloud_handle, security_handle])
}

fn connect_channels(
    cloud: CloudServer,
    security: SecurityModule,
    party_ids: &[usize],
    timeout: Duration,
    log: &MessageLog,
) -> Result<Network> {
    let (cloud_tx, cloud_inbox) = mpsc::channel();
    let mut outboxes: Vec<Box<dyn Outbox>> = Vec::new();
    let mut inboxes = Vec::new();
    let mut cloud_to_parties: Vec<Box<dyn Outbox>> = Vec::new();
    for _ in party_ids {
        outboxes.push(Box::new(ChannelOutbox::new(cloud_tx.clone())));
        let (tx, rx) = mpsc::channel();
        cloud_to_parties.push(Box::new(ChannelOutbox::new(tx)));
        inboxes.push(rx);
    }
    drop(cloud_tx);
    let (to_security, security_inbox) = mpsc::channel();
    let (to_cloud, from_security) = mpsc::channel();
    let handles = spawn_roles(
        cloud,
        security,
        party_ids,
        timeout,
        log,
        cloud_inbox,
        cloud_to_parties,
        (Box::new(ChannelOutbox::new(to_security)), from_security),
        (Box::new(ChannelOutbox::new(to_cloud)), security_inbox),
    )?;
    Ok(Network { outboxes, inboxes, handles, timeout })
}

fn loopback_pair(listener: &TcpListener) -> Result<(TcpStream, TcpStream)> {
    let io = |e: std::io::Error| ProtocolError::Wire(e.to_string());
    let client = TcpStream::connect(listener.local_addr().map_err(io)?).map_err(io)?;
    let (server, _) = listener.accept().map_err(io)?;
    Ok((client, server))
}

fn socket_endpoint(stream: TcpStream, inbox: Sender<Result<RoundMessage>>) -> Result<Box<dyn Outbox>> {
    Ok(Box::new(wire::socket_endpoint(stream, inbox)?))
}

fn connect_sockets(
    cloud: CloudServer,
    security: SecurityModule,
    party_ids: &[usize],
    timeout: Duration,
    log: &MessageLog,
) -> Result<Network> {
    let io = |e: std::io::Error| ProtocolError::Wire(e.to_string());
    let cloud_listener = TcpListener::bind("127.0.0.1:0").map_err(io)?;
    let security_listener = TcpListener::bind("127.0.0.1:0").map_err(io)?;

    let (cloud_tx, cloud_inbox) = mpsc::channel();
    let mut outboxes = Vec::new();
    let mut inboxes = Vec::new();
    let mut cloud_to_parties = Vec::new();
    for _ in party_ids {
        let (party_side, cloud_side) = loopback_pair(&cloud_listener)?;
        let (tx, rx) = mpsc::channel();
        outboxes.push(socket_endpoint(party_side, tx)?);
        inboxes.push(rx);
        cloud_to_parties.push(socket_endpoint(cloud_side, cloud_tx.clone())?);
    }
    drop(cloud_tx);
    let (cloud_side, security_side) = loopback_pair(&security_listener)?;
    let (from_security_tx, from_security) = mpsc::channel();
    let (security_tx, security_inbox) = mpsc::channel();
    let handles = spawn_roles(
        cloud,
        security,
        party_ids,
        timeout,
        log,
        cloud_inbox,
        cloud_to_parties,
        (socket_endpoint(cloud_side, from_security_tx)?, from_security),
        (socket_endpoint(security_side, security_tx)?, security_inbox),
    )?;
    Ok(Network { outboxes, inboxes, handles, timeout })
}
