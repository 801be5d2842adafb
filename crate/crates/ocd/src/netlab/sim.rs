//! Deterministic packet-level network lab.
//!
//! Single-threaded event loop over a nanosecond clock. Ties in event time
//! break deterministically by insertion sequence. Links are directed
//! drop-tail queues with a busy/service serialization model; every packet
//! pays `size / bandwidth` on each hop plus propagation latency. A
//! simplified TCP runs on top: 3-way handshake, per-ACK slow start,
//! additive increase above ssthresh, fast retransmit on three duplicate
//! ACKs, and a doubling retransmission timer. Segments carry real payload
//! bytes so end-to-end digests are meaningful.
//!
//! Relay hosts run the same [`RelayEngine`] as the socket driver. The lab
//! transport can observe connection attempts, so SYNs may carry the final
//! destination as metadata; this is how a relay begins its upstream dial
//! at SYN arrival rather than after the request shows up.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::model::{Topology, TransportParams};
use crate::relay::config::RelayConfig;
use crate::relay::engine::{Cmd, RelayEngine};

pub const PACKET_HEADER_BYTES: u64 = 40;
const MAX_SYN_RETRIES: u32 = 5;
const MAX_RTO_RETRIES: u32 = 15;
const INITIAL_RTO_NS: u64 = 1_000_000_000;
const MIN_RTO_NS: u64 = 200_000_000;
const PROBE_TIMEOUT_NS: u64 = 3_000_000_000;

pub const MS: f64 = 1e6;

/// An endpoint address inside the lab: host index plus port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SimAddr {
    pub node: usize,
    pub port: u16,
}

/// Lab nodes live in a synthetic 10.0.0.0/16 so the relay engine can keep
/// speaking `SocketAddr`.
pub fn sock_of(addr: SimAddr) -> SocketAddr {
    let ip = Ipv4Addr::new(10, 0, (addr.node >> 8) as u8, (addr.node & 0xff) as u8);
    SocketAddr::new(IpAddr::V4(ip), addr.port)
}

pub fn sim_of(sock: SocketAddr) -> SimAddr {
    match sock.ip() {
        IpAddr::V4(ip) => {
            let o = ip.octets();
            SimAddr { node: ((o[2] as usize) << 8) | o[3] as usize, port: sock.port() }
        }
        IpAddr::V6(_) => panic!("lab addresses are IPv4"),
    }
}

#[derive(Debug, Clone)]
struct Segment {
    conn: usize,
    from_a: bool,
    syn: bool,
    synack: bool,
    fin: bool,
    rst: bool,
    seq: u64,
    ack: Option<u64>,
    payload: Vec<u8>,
    final_dest: Option<SimAddr>,
}

#[derive(Debug, Clone)]
enum PacketKind {
    Seg(Segment),
    ProbeReq { batch: usize, i: usize },
    ProbeResp { batch: usize, i: usize },
}

#[derive(Debug, Clone)]
struct Packet {
    kind: PacketKind,
    path: Vec<usize>,
    pos: usize,
    fwd: bool,
    size: u64,
}

#[derive(Debug)]
enum Ev {
    Depart { link: usize, packet: Packet },
    Arrive { packet: Packet },
    Rto { conn: usize, a_side: bool, gen: u64 },
    AttemptReady { conn: usize },
    StartFlow { flow: usize },
    AbortFlow { flow: usize },
    ProbeSend { batch: usize, i: usize },
    ProbeTimeout,
}

/// One exported trace row: packet and connection lifecycle events.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t_ns: u64,
    pub event: &'static str,
    pub conn: Option<usize>,
    pub cwnd: f64,
    pub bytes: u64,
}

struct Scheduled {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Reversed: BinaryHeap pops the earliest (time, seq) first.
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

struct LinkState {
    latency_ns: u64,
    bandwidth: f64,
    loss_rate: f64,
    queue_capacity: usize,
    busy_until_ns: u64,
    queued: usize,
    drops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Client(usize),
    Server,
    Relay(usize),
    /// Accept side not yet resolved (SYN in flight).
    Unbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RtxKind {
    Data,
    Fin,
}

struct Endpoint {
    params: TransportParams,
    established: bool,
    closed: bool,
    // Sender.
    snd_buf: Vec<u8>,
    snd_nxt: u64,
    snd_una: u64,
    rtx: BTreeMap<u64, (Vec<u8>, RtxKind)>,
    cwnd: f64,
    ssthresh: f64,
    dupacks: u32,
    recover: u64,
    /// Sequence numbers of segments dropped in the network and not yet
    /// repaired; stands in for the information SACK would carry.
    lost: std::collections::BTreeSet<u64>,
    rto_ns: u64,
    /// Measured handshake-derived floor the RTO returns to after new ACKs.
    rto_base_ns: u64,
    rto_gen: u64,
    rto_armed: bool,
    rto_retries: u32,
    fin_queued: bool,
    fin_sent: bool,
    fin_acked: bool,
    // Receiver.
    rcv_nxt: u64,
    ooo: BTreeMap<u64, (Vec<u8>, RtxKind)>,
    eof_delivered: bool,
}

impl Endpoint {
    fn new(params: TransportParams) -> Endpoint {
        Endpoint {
            params,
            established: false,
            closed: false,
            snd_buf: Vec::new(),
            snd_nxt: 0,
            snd_una: 0,
            rtx: BTreeMap::new(),
            cwnd: params.init_cwnd as f64,
            ssthresh: f64::INFINITY,
            dupacks: 0,
            recover: 0,
            lost: std::collections::BTreeSet::new(),
            rto_ns: INITIAL_RTO_NS,
            rto_base_ns: INITIAL_RTO_NS,
            rto_gen: 0,
            rto_armed: false,
            rto_retries: 0,
            fin_queued: false,
            fin_sent: false,
            fin_acked: false,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            eof_delivered: false,
        }
    }

    fn inflight(&self) -> u64 {
        self.snd_nxt - self.snd_una
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnPhase {
    SynSent,
    AttemptPending,
    Open,
    Dead,
}

struct Conn {
    path: Vec<usize>,
    b_addr: SimAddr,
    a_owner: Owner,
    b_owner: Owner,
    a: Endpoint,
    b: Endpoint,
    phase: ConnPhase,
    final_dest: Option<SimAddr>,
    dial_token: Option<u64>,
    syn_retries: u32,
    /// Request bytes accumulated on the server side of this connection.
    srv_req: Vec<u8>,
    srv_sent: bool,
    syn_sent_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowState {
    Pending,
    Connecting,
    Transferring,
    Done,
    Failed,
}

/// One client-driven download: connect, send `GET <n>`, read `n` bytes.
pub struct Flow {
    pub client: usize,
    pub dest: SimAddr,
    pub path: Vec<usize>,
    pub params: TransportParams,
    pub request_bytes: u64,
    pub start_ns: u64,
    pub window_ns: u64,
    pub state: FlowState,
    pub syn_ns: u64,
    pub established_ns: u64,
    pub first_byte_ns: u64,
    pub eof_ns: u64,
    pub bytes_received: u64,
    pub series: Vec<u64>,
    conn: usize,
    hasher: Sha256,
}

impl Flow {
    pub fn ttfb_ms(&self) -> f64 {
        (self.first_byte_ns - self.syn_ns) as f64 / MS
    }
    pub fn completion_ms(&self) -> f64 {
        (self.eof_ns - self.syn_ns) as f64 / MS
    }
    pub fn digest(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// Expected digest of a server response of `n` bytes.
pub fn expected_digest(n: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut i = 0u64;
    let mut buf = Vec::with_capacity(64 * 1024);
    while i < n {
        buf.clear();
        let chunk = (n - i).min(64 * 1024);
        for j in 0..chunk {
            buf.push(((i + j) % 251) as u8);
        }
        h.update(&buf);
        i += chunk;
    }
    h.finalize().into()
}

fn response_chunk(offset: u64, len: usize) -> Vec<u8> {
    (0..len as u64).map(|j| ((offset + j) % 251) as u8).collect()
}

enum ListenerKind {
    Server,
    Relay(usize),
}

struct Listener {
    kind: ListenerKind,
    params: TransportParams,
}

struct RelayNode {
    node: usize,
    engine: Option<RelayEngine>,
    fork_delay_ns: u64,
}

struct ProbeBatch {
    samples: Vec<Option<u64>>,
    sent_ns: Vec<u64>,
    path: Vec<usize>,
}

pub struct Sim {
    topo: Topology,
    now_ns: u64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    links: Vec<LinkState>,
    link_index: HashMap<(usize, usize), usize>,
    listeners: HashMap<SimAddr, Listener>,
    relays: Vec<RelayNode>,
    conns: Vec<Conn>,
    pub flows: Vec<Flow>,
    probes: Vec<ProbeBatch>,
    path_overrides: HashMap<(usize, usize), Vec<usize>>,
    jitter_max_ns: u64,
    events_processed: u64,
    trace_enabled: bool,
    pub trace: Vec<TraceRow>,
    /// Set when a run stopped at its time limit with events still queued.
    pub partial: bool,
}

impl Sim {
    pub fn new(topo: &Topology, seed: u64) -> Sim {
        let mut links = Vec::new();
        let mut link_index = HashMap::new();
        for l in &topo.links {
            let s = topo.host_index(&l.src).expect("link src exists");
            let d = topo.host_index(&l.dst).expect("link dst exists");
            link_index.insert((s, d), links.len());
            links.push(LinkState {
                latency_ns: (l.latency_ms * MS) as u64,
                bandwidth: l.bandwidth,
                loss_rate: l.loss_rate,
                queue_capacity: l.queue_capacity,
                busy_until_ns: 0,
                queued: 0,
                drops: 0,
            });
        }
        Sim {
            topo: topo.clone(),
            now_ns: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            links,
            link_index,
            listeners: HashMap::new(),
            relays: Vec::new(),
            conns: Vec::new(),
            flows: Vec::new(),
            probes: Vec::new(),
            path_overrides: HashMap::new(),
            jitter_max_ns: 0,
            events_processed: 0,
            trace_enabled: false,
            trace: Vec::new(),
            partial: false,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace_enabled = true;
    }

    fn tr(&mut self, event: &'static str, conn: Option<usize>, bytes: u64) {
        if !self.trace_enabled {
            return;
        }
        let cwnd = conn.map(|c| self.conns[c].a.cwnd).unwrap_or(0.0);
        self.trace.push(TraceRow { t_ns: self.now_ns, event, conn, cwnd, bytes });
    }

    /// Per-hop random extra latency, used by fairness scenarios to break
    /// phase locks between otherwise identical flows. Timing scenarios
    /// leave it at zero.
    pub fn set_jitter_ns(&mut self, max_ns: u64) {
        self.jitter_max_ns = max_ns;
    }

    pub fn node(&self, name: &str) -> usize {
        self.topo.host_index(name).expect("unknown host")
    }

    pub fn now_ms(&self) -> f64 {
        self.now_ns as f64 / MS
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn link_drops(&self) -> u64 {
        self.links.iter().map(|l| l.drops).sum()
    }

    /// Force the path a relay dial toward `dst` will take.
    pub fn set_path(&mut self, src: usize, dst: usize, path: Vec<usize>) {
        self.path_overrides.insert((src, dst), path);
    }

    fn lookup_path(&self, src: usize, dst: usize) -> Vec<usize> {
        if let Some(p) = self.path_overrides.get(&(src, dst)) {
            return p.clone();
        }
        let names = self
            .topo
            .shortest_path(&self.topo.hosts[src].id, &self.topo.hosts[dst].id)
            .expect("no path between hosts");
        names
            .iter()
            .map(|n| self.topo.host_index(n).unwrap())
            .collect()
    }

    pub fn install_server(&mut self, host: &str, port: u16, params: TransportParams) {
        let node = self.node(host);
        self.listeners.insert(
            SimAddr { node, port },
            Listener { kind: ListenerKind::Server, params },
        );
    }

    /// Installs a relay engine on a host. Pool pre-fill dials start at the
    /// current sim time.
    pub fn install_relay(&mut self, host: &str, cfg: RelayConfig) {
        let node = self.node(host);
        let fork_delay_ns = if cfg.features.thread_pool {
            0
        } else {
            (cfg.fork_delay_ms * MS) as u64
        };
        let idx = self.relays.len();
        let peer_params = if cfg.features.turbo_start {
            cfg.intra_cloud_params
        } else {
            cfg.external_params
        };
        for port in cfg.accept_ports() {
            self.listeners.insert(
                SimAddr { node, port },
                Listener { kind: ListenerKind::Relay(idx), params: cfg.external_params },
            );
        }
        self.listeners.insert(
            SimAddr { node, port: cfg.peer_listen.port() },
            Listener { kind: ListenerKind::Relay(idx), params: peer_params },
        );
        let mut engine = RelayEngine::new(cfg);
        let cmds = engine.start();
        self.relays.push(RelayNode { node, engine: Some(engine), fork_delay_ns });
        self.apply_relay_cmds(idx, cmds);
    }

    /// Registers a download flow. The connection's route is fixed to
    /// `path` regardless of what other routes exist.
    pub fn add_flow(
        &mut self,
        client: &str,
        dest: SimAddr,
        path: Vec<usize>,
        params: TransportParams,
        request_bytes: u64,
        start_ns: u64,
        window_ns: u64,
    ) -> usize {
        let client = self.node(client);
        assert_eq!(path.first(), Some(&client));
        assert_eq!(path.last(), Some(&dest.node));
        let id = self.flows.len();
        self.flows.push(Flow {
            client,
            dest,
            path,
            params,
            request_bytes,
            start_ns,
            window_ns,
            state: FlowState::Pending,
            syn_ns: 0,
            established_ns: 0,
            first_byte_ns: 0,
            eof_ns: 0,
            bytes_received: 0,
            series: Vec::new(),
            conn: usize::MAX,
            hasher: Sha256::new(),
        });
        self.schedule(start_ns, Ev::StartFlow { flow: id });
        id
    }

    /// Fires `count` raw probe packets along `path`, `interval_ns` apart.
    /// A probe that is lost in either direction yields a `None` sample.
    pub fn add_probes(&mut self, path: Vec<usize>, count: usize, interval_ns: u64) -> usize {
        let id = self.probes.len();
        self.probes.push(ProbeBatch {
            samples: vec![None; count],
            sent_ns: vec![0; count],
            path,
        });
        for i in 0..count {
            self.schedule(self.now_ns + i as u64 * interval_ns, Ev::ProbeSend { batch: id, i });
        }
        id
    }

    pub fn probe_samples_ms(&self, batch: usize) -> Vec<Option<f64>> {
        self.probes[batch]
            .samples
            .iter()
            .map(|s| s.map(|ns| ns as f64 / MS))
            .collect()
    }

    pub fn relay_status(&self, idx: usize) -> crate::relay::engine::RelayStatus {
        self.relays[idx].engine.as_ref().unwrap().status()
    }

    fn schedule(&mut self, t: u64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Scheduled { t, seq, ev });
    }

    pub fn run_until_idle(&mut self) {
        self.run_for(None);
    }

    /// Runs until the queue drains or virtual time passes `limit_ns`.
    /// Returns false (and flags the run partial) if the limit was hit.
    pub fn run_for(&mut self, limit_ns: Option<u64>) -> bool {
        while let Some(s) = self.heap.pop() {
            if let Some(limit) = limit_ns {
                if s.t > limit {
                    self.heap.push(s);
                    self.partial = true;
                    return false;
                }
            }
            debug_assert!(s.t >= self.now_ns, "time went backwards");
            self.now_ns = s.t;
            self.events_processed += 1;
            self.dispatch(s.ev);
        }
        true
    }

    /// Tears down a flow's connection mid-stream at `at_ns` (client-side
    /// reset), used to exercise abort handling through relay chains.
    pub fn schedule_abort(&mut self, flow: usize, at_ns: u64) {
        self.schedule(at_ns, Ev::AbortFlow { flow });
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Depart { link, packet } => self.on_depart(link, packet),
            Ev::Arrive { packet } => self.on_arrive(packet),
            Ev::Rto { conn, a_side, gen } => self.on_rto(conn, a_side, gen),
            Ev::AttemptReady { conn } => self.handle_attempt(conn),
            Ev::StartFlow { flow } => self.start_flow(flow),
            Ev::AbortFlow { flow } => {
                let f = &self.flows[flow];
                if f.state == FlowState::Done || f.state == FlowState::Failed {
                    return;
                }
                let conn = f.conn;
                self.flows[flow].state = FlowState::Failed;
                self.tr("abort", Some(conn).filter(|&c| c != usize::MAX), 0);
                if conn != usize::MAX {
                    self.reset(conn, true);
                }
            }
            Ev::ProbeSend { batch, i } => {
                self.probes[batch].sent_ns[i] = self.now_ns;
                let path = self.probes[batch].path.clone();
                self.route(Packet {
                    kind: PacketKind::ProbeReq { batch, i },
                    pos: 0,
                    fwd: true,
                    size: PACKET_HEADER_BYTES,
                    path,
                });
                self.schedule(self.now_ns + PROBE_TIMEOUT_NS, Ev::ProbeTimeout);
            }
            Ev::ProbeTimeout => {} // sample stays None if the response never landed
        }
    }

    // ---- packet transport ----

    fn route(&mut self, packet: Packet) {
        let here = packet.path[packet.pos];
        let next = if packet.fwd {
            packet.path[packet.pos + 1]
        } else {
            packet.path[packet.pos - 1]
        };
        let Some(&link) = self.link_index.get(&(here, next)) else {
            panic!(
                "no link {} -> {}",
                self.topo.hosts[here].id, self.topo.hosts[next].id
            );
        };
        let conn = match &packet.kind {
            PacketKind::Seg(seg) => Some(seg.conn),
            _ => None,
        };
        let l = &mut self.links[link];
        if l.queued >= l.queue_capacity {
            l.drops += 1;
            self.tr("queue_drop", conn, packet.size);
            self.mark_lost(&packet);
            return;
        }
        l.queued += 1;
        let service_ns = (packet.size as f64 / l.bandwidth * 1e9) as u64;
        let depart = l.busy_until_ns.max(self.now_ns) + service_ns;
        l.busy_until_ns = depart;
        self.schedule(depart, Ev::Depart { link, packet });
    }

    fn on_depart(&mut self, link: usize, mut packet: Packet) {
        let (lost, latency) = {
            let l = &mut self.links[link];
            l.queued -= 1;
            let lost = l.loss_rate > 0.0 && self.rng.gen::<f64>() < l.loss_rate;
            if lost {
                l.drops += 1;
            }
            (lost, l.latency_ns)
        };
        if lost {
            let conn = match &packet.kind {
                PacketKind::Seg(seg) => Some(seg.conn),
                _ => None,
            };
            self.tr("loss", conn, packet.size);
            self.mark_lost(&packet);
            return;
        }
        let jitter = if self.jitter_max_ns > 0 {
            self.rng.gen_range(0..=self.jitter_max_ns)
        } else {
            0
        };
        if packet.fwd {
            packet.pos += 1;
        } else {
            packet.pos -= 1;
        }
        self.schedule(self.now_ns + latency + jitter, Ev::Arrive { packet });
    }

    fn on_arrive(&mut self, packet: Packet) {
        let terminal = if packet.fwd {
            packet.pos == packet.path.len() - 1
        } else {
            packet.pos == 0
        };
        if !terminal {
            self.route(packet);
            return;
        }
        match packet.kind {
            PacketKind::ProbeReq { batch, i } => {
                let path = packet.path;
                let pos = path.len() - 1;
                self.route(Packet {
                    kind: PacketKind::ProbeResp { batch, i },
                    path,
                    pos,
                    fwd: false,
                    size: PACKET_HEADER_BYTES,
                });
            }
            PacketKind::ProbeResp { batch, i } => {
                let b = &mut self.probes[batch];
                b.samples[i] = Some(self.now_ns - b.sent_ns[i]);
            }
            PacketKind::Seg(seg) => self.on_segment(seg),
        }
    }

    // ---- TCP ----

    fn seg_packet(&self, conn: usize, seg: Segment) -> Packet {
        let c = &self.conns[conn];
        let size = PACKET_HEADER_BYTES + seg.payload.len() as u64;
        let (pos, fwd) = if seg.from_a { (0, true) } else { (c.path.len() - 1, false) };
        Packet { kind: PacketKind::Seg(seg), path: c.path.clone(), pos, fwd, size }
    }

    fn send_seg(&mut self, conn: usize, seg: Segment) {
        self.tr("send", Some(conn), seg.payload.len() as u64);
        let p = self.seg_packet(conn, seg);
        self.route(p);
    }

    fn blank_seg(conn: usize, from_a: bool) -> Segment {
        Segment {
            conn,
            from_a,
            syn: false,
            synack: false,
            fin: false,
            rst: false,
            seq: 0,
            ack: None,
            payload: Vec::new(),
            final_dest: None,
        }
    }

    fn open_conn(
        &mut self,
        a_owner: Owner,
        a_node: usize,
        dest: SimAddr,
        path: Vec<usize>,
        params: TransportParams,
        final_dest: Option<SimAddr>,
        dial_token: Option<u64>,
    ) -> usize {
        assert_eq!(path.first(), Some(&a_node));
        assert_eq!(path.last(), Some(&dest.node));
        let id = self.conns.len();
        self.conns.push(Conn {
            path,
            b_addr: dest,
            a_owner,
            b_owner: Owner::Unbound,
            a: Endpoint::new(params),
            b: Endpoint::new(TransportParams::default()),
            phase: ConnPhase::SynSent,
            final_dest,
            dial_token,
            syn_retries: 0,
            srv_req: Vec::new(),
            srv_sent: false,
            syn_sent_ns: self.now_ns,
        });
        self.send_syn(id);
        id
    }

    fn send_syn(&mut self, conn: usize) {
        let final_dest = self.conns[conn].final_dest;
        let mut seg = Self::blank_seg(conn, true);
        seg.syn = true;
        seg.final_dest = final_dest;
        self.send_seg(conn, seg);
        // SYN loss protection via the regular retransmission timer.
        let ep = &mut self.conns[conn].a;
        ep.rto_gen += 1;
        ep.rto_armed = true;
        let (gen, rto) = (ep.rto_gen, ep.rto_ns);
        self.schedule(self.now_ns + rto, Ev::Rto { conn, a_side: true, gen });
    }

    fn start_flow(&mut self, flow: usize) {
        let f = &self.flows[flow];
        let (node, dest, path, params) = (f.client, f.dest, f.path.clone(), f.params);
        let conn = self.open_conn(Owner::Client(flow), node, dest, path, params, None, None);
        let f = &mut self.flows[flow];
        f.conn = conn;
        f.state = FlowState::Connecting;
        f.syn_ns = self.now_ns;
    }

    fn on_segment(&mut self, seg: Segment) {
        let conn = seg.conn;
        self.tr("recv", Some(conn), seg.payload.len() as u64);
        if self.conns[conn].phase == ConnPhase::Dead {
            return;
        }
        if seg.rst {
            self.on_rst(conn, seg.from_a);
            return;
        }
        if seg.syn {
            self.on_syn(conn, seg);
            return;
        }
        if seg.synack {
            self.on_synack(conn);
            return;
        }
        if self.conns[conn].phase == ConnPhase::AttemptPending {
            // Data raced ahead of a delayed accept: requeue after the fork.
            let t = self.now_ns + 1;
            let p = self.seg_packet(conn, seg);
            self.schedule(t, Ev::Arrive { packet: p });
            return;
        }
        // The side that *receives* this segment.
        let rcv_is_a = !seg.from_a;
        if let Some(ack) = seg.ack {
            self.on_ack(conn, rcv_is_a, ack);
        }
        if !seg.payload.is_empty() || seg.fin {
            self.on_payload(conn, rcv_is_a, seg);
        }
    }

    fn on_syn(&mut self, conn: usize, seg: Segment) {
        let c = &mut self.conns[conn];
        match c.phase {
            ConnPhase::SynSent => {}
            ConnPhase::Open => {
                // Duplicate SYN (retransmit): just re-answer.
                let mut s = Self::blank_seg(conn, false);
                s.synack = true;
                self.send_seg(conn, s);
                return;
            }
            _ => return,
        }
        let addr = c.b_addr;
        let Some(listener) = self.listeners.get(&addr) else {
            // Nobody listening: refuse.
            let mut s = Self::blank_seg(conn, false);
            s.rst = true;
            self.send_seg(conn, s);
            return;
        };
        let params = listener.params;
        let (owner, fork) = match listener.kind {
            ListenerKind::Server => (Owner::Server, 0),
            ListenerKind::Relay(idx) => (Owner::Relay(idx), self.relays[idx].fork_delay_ns),
        };
        let c = &mut self.conns[conn];
        c.b = Endpoint::new(params);
        c.b_owner = owner;
        c.final_dest = c.final_dest.or(seg.final_dest);
        if fork > 0 {
            c.phase = ConnPhase::AttemptPending;
            self.schedule(self.now_ns + fork, Ev::AttemptReady { conn });
        } else {
            self.handle_attempt(conn);
        }
    }

    fn handle_attempt(&mut self, conn: usize) {
        self.conns[conn].phase = ConnPhase::Open;
        if let Owner::Relay(idx) = self.conns[conn].b_owner {
            let port = self.conns[conn].b_addr.port;
            let hint = self.conns[conn].final_dest.map(sock_of);
            let cmds = self.with_engine(idx, |e| e.on_conn_attempt(conn as u64, port, hint));
            self.apply_relay_cmds(idx, cmds);
        }
        let mut s = Self::blank_seg(conn, false);
        s.synack = true;
        self.send_seg(conn, s);
    }

    fn on_synack(&mut self, conn: usize) {
        let c = &mut self.conns[conn];
        if c.a.established {
            return;
        }
        c.a.established = true;
        c.a.rto_gen += 1;
        c.a.rto_armed = false;
        c.a.rto_ns = ((self.now_ns - c.syn_sent_ns) * 2).max(MIN_RTO_NS);
        c.a.rto_base_ns = c.a.rto_ns;
        // Handshake-completing ACK; piggybacks on data below if any.
        let mut s = Self::blank_seg(conn, true);
        s.ack = Some(c.a.rcv_nxt);
        let owner = c.a_owner;
        let token = c.dial_token;
        self.send_seg(conn, s);
        self.tr("established", Some(conn), 0);
        match owner {
            Owner::Client(flow) => {
                let f = &mut self.flows[flow];
                f.state = FlowState::Transferring;
                f.established_ns = self.now_ns;
                let req = format!("GET {}\n", f.request_bytes).into_bytes();
                self.write(conn, true, &req);
                self.shutdown(conn, true);
            }
            Owner::Relay(idx) => {
                let token = token.expect("relay dial has a token");
                let cmds =
                    self.with_engine(idx, |e| e.on_dial_result(token, Ok(conn as u64)));
                self.apply_relay_cmds(idx, cmds);
            }
            _ => {}
        }
    }

    fn on_rst(&mut self, conn: usize, from_a: bool) {
        self.tr("rst", Some(conn), 0);
        let c = &mut self.conns[conn];
        let was_syn_sent = c.phase == ConnPhase::SynSent;
        c.phase = ConnPhase::Dead;
        c.a.closed = true;
        c.b.closed = true;
        c.a.rto_gen += 1;
        c.b.rto_gen += 1;
        let owner = if from_a { c.b_owner } else { c.a_owner };
        let token = c.dial_token;
        match owner {
            Owner::Client(flow) => self.flows[flow].state = FlowState::Failed,
            Owner::Relay(idx) => {
                let cmds = if was_syn_sent && !from_a {
                    let token = token.expect("relay dial has a token");
                    self.with_engine(idx, |e| {
                        e.on_dial_result(token, Err("connection refused".into()))
                    })
                } else {
                    self.with_engine(idx, |e| e.on_reset(conn as u64))
                };
                self.apply_relay_cmds(idx, cmds);
            }
            _ => {}
        }
    }

    fn ep(&mut self, conn: usize, a_side: bool) -> &mut Endpoint {
        let c = &mut self.conns[conn];
        if a_side {
            &mut c.a
        } else {
            &mut c.b
        }
    }

    fn on_ack(&mut self, conn: usize, at_a: bool, ack: u64) {
        // An arriving ACK also completes the acceptor's handshake.
        if !at_a && !self.conns[conn].b.established {
            self.conns[conn].b.established = true;
            // Roughly three one-way delays since the initiator's SYN; a
            // serviceable RTO floor for the acceptor side.
            let measured = ((self.now_ns - self.conns[conn].syn_sent_ns) * 2).max(MIN_RTO_NS);
            self.conns[conn].b.rto_ns = measured;
            self.conns[conn].b.rto_base_ns = measured;
            if let Owner::Relay(idx) = self.conns[conn].b_owner {
                let cmds = self.with_engine(idx, |e| e.on_established(conn as u64));
                self.apply_relay_cmds(idx, cmds);
            }
        }
        let ep = self.ep(conn, at_a);
        if ack > ep.snd_una {
            let newly = ack - ep.snd_una;
            ep.snd_una = ack;
            ep.dupacks = 0;
            ep.rto_retries = 0;
            ep.rto_ns = ep.rto_base_ns;
            while let Some((&seq, _)) = ep.rtx.iter().next() {
                let end = seq + ep.rtx[&seq].0.len().max(1) as u64;
                if end <= ack {
                    ep.rtx.remove(&seq);
                } else {
                    break;
                }
            }
            ep.lost = ep.lost.split_off(&ack);
            let mss = ep.params.mss as f64;
            let acked_segs = (newly as f64 / mss).ceil();
            if ack < ep.recover {
                // Partial ack inside recovery: repair the remaining holes.
                self.retransmit_lost(conn, at_a);
            } else if ep.cwnd < ep.ssthresh {
                ep.cwnd += acked_segs;
            } else {
                ep.cwnd += acked_segs / ep.cwnd;
            }
            let ep = self.ep(conn, at_a);
            ep.rto_gen += 1;
            ep.rto_armed = false;
            if ep.fin_sent && !ep.fin_acked && ep.snd_una >= ep.snd_nxt {
                ep.fin_acked = true;
            }
            if ep.inflight() > 0 {
                self.arm_rto(conn, at_a);
            }
            self.try_send(conn, at_a);
        } else if ack == ep.snd_una && ep.inflight() > 0 {
            ep.dupacks += 1;
            if ep.dupacks == 3 && ep.snd_una >= ep.recover {
                let inflight_segs = ep.inflight() as f64 / ep.params.mss as f64;
                ep.ssthresh = (inflight_segs / 2.0).max(2.0);
                ep.cwnd = ep.ssthresh;
                ep.recover = ep.snd_nxt;
                if self.ep(conn, at_a).lost.is_empty() {
                    // Dupacks without a recorded drop (e.g. a lost ACK
                    // pattern): fall back to resending the first hole.
                    let ep = self.ep(conn, at_a);
                    if let Some((&seq, (data, kind))) = ep.rtx.iter().next() {
                        let seg_data = data.clone();
                        let fin = *kind == RtxKind::Fin;
                        let rcv_nxt = ep.rcv_nxt;
                        self.retransmit(conn, at_a, seq, seg_data, fin, rcv_nxt);
                    }
                } else {
                    self.retransmit_lost(conn, at_a);
                }
            } else if ep.dupacks > 3 && ep.snd_una < ep.recover {
                // Drops discovered after recovery began.
                self.retransmit_lost(conn, at_a);
            }
        }
    }

    /// Records a dropped data segment on its sender's scoreboard; the moral
    /// equivalent of the loss information SACK would eventually deliver.
    fn mark_lost(&mut self, packet: &Packet) {
        if let PacketKind::Seg(seg) = &packet.kind {
            if seg.rst || seg.syn || seg.synack {
                return; // covered by the handshake retry timer
            }
            if seg.payload.is_empty() && !seg.fin {
                return; // pure ACK; the cumulative ACK clock absorbs it
            }
            self.ep(seg.conn, seg.from_a).lost.insert(seg.seq);
        }
    }

    /// Resends every segment currently known lost and still unacked. The
    /// scoreboard is snapshotted first: a resend dropped right back onto a
    /// still-full queue re-marks itself and waits for the next trigger.
    fn retransmit_lost(&mut self, conn: usize, at_a: bool) {
        let batch = std::mem::take(&mut self.ep(conn, at_a).lost);
        for seq in batch {
            let ep = self.ep(conn, at_a);
            if let Some((data, kind)) = ep.rtx.get(&seq) {
                let seg_data = data.clone();
                let fin = *kind == RtxKind::Fin;
                let rcv_nxt = ep.rcv_nxt;
                self.retransmit(conn, at_a, seq, seg_data, fin, rcv_nxt);
            }
        }
    }

    fn retransmit(
        &mut self,
        conn: usize,
        at_a: bool,
        seq: u64,
        data: Vec<u8>,
        fin: bool,
        rcv_nxt: u64,
    ) {
        let mut s = Self::blank_seg(conn, at_a);
        s.seq = seq;
        s.payload = data;
        s.fin = fin;
        s.ack = Some(rcv_nxt);
        self.send_seg(conn, s);
    }

    fn on_rto(&mut self, conn: usize, a_side: bool, gen: u64) {
        if self.conns[conn].phase == ConnPhase::Dead {
            return;
        }
        // SYN timeout.
        if a_side && !self.conns[conn].a.established {
            if self.conns[conn].a.rto_gen != gen {
                return;
            }
            let c = &mut self.conns[conn];
            c.syn_retries += 1;
            if c.syn_retries > MAX_SYN_RETRIES {
                self.fail_conn(conn, true);
                return;
            }
            self.conns[conn].a.rto_ns *= 2;
            self.send_syn(conn);
            return;
        }
        let ep = self.ep(conn, a_side);
        if !ep.rto_armed || ep.rto_gen != gen || ep.inflight() == 0 {
            return;
        }
        ep.rto_retries += 1;
        if ep.rto_retries > MAX_RTO_RETRIES {
            self.fail_conn(conn, a_side);
            return;
        }
        ep.ssthresh = (ep.cwnd / 2.0).max(2.0);
        ep.cwnd = 1.0;
        ep.rto_ns = (ep.rto_ns * 2).max(MIN_RTO_NS);
        ep.recover = ep.snd_nxt;
        if let Some((&seq, (data, kind))) = ep.rtx.iter().next() {
            let seg_data = data.clone();
            let fin = *kind == RtxKind::Fin;
            let rcv_nxt = ep.rcv_nxt;
            self.ep(conn, a_side).lost.remove(&seq);
            self.retransmit(conn, a_side, seq, seg_data, fin, rcv_nxt);
        }
        self.retransmit_lost(conn, a_side);
        self.arm_rto(conn, a_side);
    }

    fn fail_conn(&mut self, conn: usize, from_a: bool) {
        // Local give-up behaves like an incoming reset plus a RST to the peer.
        let mut s = Self::blank_seg(conn, from_a);
        s.rst = true;
        self.send_seg(conn, s);
        self.on_rst(conn, !from_a);
    }

    fn arm_rto(&mut self, conn: usize, a_side: bool) {
        let ep = self.ep(conn, a_side);
        ep.rto_gen += 1;
        ep.rto_armed = true;
        let (gen, rto) = (ep.rto_gen, ep.rto_ns);
        self.schedule(self.now_ns + rto, Ev::Rto { conn, a_side, gen });
    }

    fn on_payload(&mut self, conn: usize, at_a: bool, seg: Segment) {
        let ep = self.ep(conn, at_a);
        if ep.eof_delivered || ep.closed {
            // Late retransmits after EOF: ack and drop.
            let rcv_nxt = ep.rcv_nxt;
            self.send_ack(conn, at_a, rcv_nxt);
            return;
        }
        let kind = if seg.fin { RtxKind::Fin } else { RtxKind::Data };
        if seg.seq >= ep.rcv_nxt {
            ep.ooo.entry(seg.seq).or_insert((seg.payload, kind));
        }
        // Drain whatever is now in order.
        let mut delivered = Vec::new();
        let mut got_fin = false;
        loop {
            let Some((&seq, _)) = self.ep(conn, at_a).ooo.iter().next() else { break };
            let ep = self.ep(conn, at_a);
            if seq != ep.rcv_nxt {
                break;
            }
            let (data, kind) = ep.ooo.remove(&seq).unwrap();
            ep.rcv_nxt += data.len().max(1) as u64;
            if kind == RtxKind::Fin {
                got_fin = true;
                ep.eof_delivered = true;
                break;
            }
            delivered.push(data);
        }
        let rcv_nxt = self.ep(conn, at_a).rcv_nxt;
        self.send_ack(conn, at_a, rcv_nxt);
        for data in delivered {
            self.app_data(conn, at_a, data);
        }
        if got_fin {
            self.app_eof(conn, at_a);
        }
    }

    fn send_ack(&mut self, conn: usize, at_a: bool, rcv_nxt: u64) {
        let mut s = Self::blank_seg(conn, at_a);
        s.ack = Some(rcv_nxt);
        self.send_seg(conn, s);
    }

    // ---- app-facing connection API ----

    fn write(&mut self, conn: usize, a_side: bool, data: &[u8]) {
        let ep = self.ep(conn, a_side);
        if ep.closed || ep.fin_queued {
            return;
        }
        ep.snd_buf.extend_from_slice(data);
        self.try_send(conn, a_side);
    }

    fn shutdown(&mut self, conn: usize, a_side: bool) {
        let ep = self.ep(conn, a_side);
        if ep.closed || ep.fin_queued {
            return;
        }
        ep.fin_queued = true;
        self.try_send(conn, a_side);
    }

    fn reset(&mut self, conn: usize, a_side: bool) {
        if self.conns[conn].phase == ConnPhase::Dead {
            return;
        }
        let mut s = Self::blank_seg(conn, a_side);
        s.rst = true;
        self.send_seg(conn, s);
        self.conns[conn].phase = ConnPhase::Dead;
        self.conns[conn].a.rto_gen += 1;
        self.conns[conn].b.rto_gen += 1;
    }

    fn try_send(&mut self, conn: usize, a_side: bool) {
        if self.conns[conn].phase == ConnPhase::Dead {
            return;
        }
        let peer_rwnd = {
            let c = &self.conns[conn];
            if a_side { c.b.params.rwnd } else { c.a.params.rwnd }
        };
        loop {
            let ep = self.ep(conn, a_side);
            if !ep.established || ep.closed {
                return;
            }
            let mss = ep.params.mss as usize;
            let window = ((ep.cwnd * ep.params.mss as f64) as u64).min(peer_rwnd);
            if ep.snd_buf.is_empty() {
                if ep.fin_queued && !ep.fin_sent && ep.inflight() < window.max(1) {
                    ep.fin_sent = true;
                    let seq = ep.snd_nxt;
                    ep.snd_nxt += 1;
                    ep.rtx.insert(seq, (Vec::new(), RtxKind::Fin));
                    let rcv_nxt = ep.rcv_nxt;
                    let mut s = Self::blank_seg(conn, a_side);
                    s.seq = seq;
                    s.fin = true;
                    s.ack = Some(rcv_nxt);
                    self.send_seg(conn, s);
                    self.arm_rto(conn, a_side);
                }
                return;
            }
            let take = mss.min(ep.snd_buf.len());
            if ep.inflight() + take as u64 > window {
                return;
            }
            let data: Vec<u8> = ep.snd_buf.drain(..take).collect();
            let seq = ep.snd_nxt;
            ep.snd_nxt += take as u64;
            ep.rtx.insert(seq, (data.clone(), RtxKind::Data));
            let rcv_nxt = ep.rcv_nxt;
            let armed = ep.rto_armed;
            let mut s = Self::blank_seg(conn, a_side);
            s.seq = seq;
            s.payload = data;
            s.ack = Some(rcv_nxt);
            self.send_seg(conn, s);
            if !armed {
                self.arm_rto(conn, a_side);
            }
        }
    }

    // ---- application layer ----

    fn app_data(&mut self, conn: usize, at_a: bool, data: Vec<u8>) {
        let owner = if at_a { self.conns[conn].a_owner } else { self.conns[conn].b_owner };
        match owner {
            Owner::Client(flow) => {
                let now = self.now_ns;
                let f = &mut self.flows[flow];
                if f.bytes_received == 0 {
                    f.first_byte_ns = now;
                }
                f.bytes_received += data.len() as u64;
                f.hasher.update(&data);
                if f.window_ns > 0 {
                    let idx = ((now - f.start_ns) / f.window_ns) as usize;
                    if f.series.len() <= idx {
                        f.series.resize(idx + 1, 0);
                    }
                    f.series[idx] += data.len() as u64;
                }
            }
            Owner::Server => {
                self.conns[conn].srv_req.extend_from_slice(&data);
                self.serve_if_ready(conn, at_a);
            }
            Owner::Relay(idx) => {
                let cmds = self.with_engine(idx, |e| e.on_data(conn as u64, &data));
                self.apply_relay_cmds(idx, cmds);
            }
            Owner::Unbound => {}
        }
    }

    fn serve_if_ready(&mut self, conn: usize, at_a: bool) {
        if self.conns[conn].srv_sent {
            return;
        }
        let Some(pos) = self.conns[conn].srv_req.iter().position(|&b| b == b'\n') else {
            return;
        };
        let line = String::from_utf8_lossy(&self.conns[conn].srv_req[..pos]).into_owned();
        let n: u64 = line
            .strip_prefix("GET ")
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0);
        self.conns[conn].srv_sent = true;
        // Stream the response in chunks to keep per-write allocations sane.
        let mut off = 0u64;
        while off < n {
            let chunk = ((n - off) as usize).min(256 * 1024);
            let body = response_chunk(off, chunk);
            self.write(conn, at_a, &body);
            off += chunk as u64;
        }
        self.shutdown(conn, at_a);
    }

    fn app_eof(&mut self, conn: usize, at_a: bool) {
        self.tr("eof", Some(conn), 0);
        let owner = if at_a { self.conns[conn].a_owner } else { self.conns[conn].b_owner };
        match owner {
            Owner::Client(flow) => {
                let f = &mut self.flows[flow];
                f.eof_ns = self.now_ns;
                f.state = FlowState::Done;
            }
            Owner::Server => {
                // Client half-closed after the request; nothing to do.
            }
            Owner::Relay(idx) => {
                let cmds = self.with_engine(idx, |e| e.on_eof(conn as u64));
                self.apply_relay_cmds(idx, cmds);
            }
            Owner::Unbound => {}
        }
    }

    // ---- relay engine driver ----

    fn with_engine<R>(&mut self, idx: usize, f: impl FnOnce(&mut RelayEngine) -> R) -> R {
        let mut engine = self.relays[idx].engine.take().expect("engine reentrancy");
        let r = f(&mut engine);
        self.relays[idx].engine = Some(engine);
        r
    }

    fn relay_side(&self, conn: usize, idx: usize) -> bool {
        let c = &self.conns[conn];
        if c.a_owner == Owner::Relay(idx) {
            true
        } else {
            debug_assert_eq!(c.b_owner, Owner::Relay(idx));
            false
        }
    }

    fn apply_relay_cmds(&mut self, idx: usize, cmds: Vec<Cmd>) {
        for cmd in cmds {
            match cmd {
                Cmd::Dial { token, dest, params, final_dest, .. } => {
                    let node = self.relays[idx].node;
                    let dest = sim_of(dest);
                    let path = self.lookup_path(node, dest.node);
                    self.open_conn(
                        Owner::Relay(idx),
                        node,
                        dest,
                        path,
                        params,
                        final_dest.map(sim_of),
                        Some(token),
                    );
                }
                Cmd::Send { conn, data } => {
                    let conn = conn as usize;
                    let side = self.relay_side(conn, idx);
                    self.write(conn, side, &data);
                }
                Cmd::ShutdownWrite { conn } => {
                    let conn = conn as usize;
                    let side = self.relay_side(conn, idx);
                    self.shutdown(conn, side);
                }
                Cmd::Reset { conn } => {
                    let conn = conn as usize;
                    let side = self.relay_side(conn, idx);
                    self.reset(conn, side);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_topology;
    use crate::timing::{timing, Scenario, Strategy};

    const SEC: u64 = 1_000_000_000;

    fn flow_path(sim: &Sim, names: &[&str]) -> Vec<usize> {
        names.iter().map(|n| sim.node(n)).collect()
    }

    #[test]
    fn direct_transfer_matches_analytic_e2e() {
        let topo = reference_topology();
        let mut sim = Sim::new(&topo, 7);
        sim.install_server("server", 80, TransportParams::default());
        let dest = SimAddr { node: sim.node("server"), port: 80 };
        let path = flow_path(&sim, &["client", "server"]);
        let f = sim.add_flow("client", dest, path, TransportParams::default(), 100_000, 0, 0);
        sim.run_until_idle();
        let flow = &sim.flows[f];
        assert_eq!(flow.state, FlowState::Done);
        assert_eq!(flow.bytes_received, 100_000);
        assert_eq!(flow.digest(), expected_digest(100_000));

        let scen = Scenario::new(
            topo.clone(),
            Strategy::E2e,
            vec!["client".into(), "server".into()],
            100_000,
        );
        let analytic = timing(&scen).unwrap();
        assert!(
            (flow.ttfb_ms() - analytic.ttfb_ms()).abs() < 1.0,
            "ttfb sim {} vs analytic {}",
            flow.ttfb_ms(),
            analytic.ttfb_ms()
        );
        assert!(
            (flow.completion_ms() - analytic.completion_ms()).abs() < 2.0,
            "completion sim {} vs analytic {}",
            flow.completion_ms(),
            analytic.completion_ms()
        );
    }

    #[test]
    fn forced_relay_path_matches_analytic_nosplit() {
        let topo = reference_topology();
        let mut sim = Sim::new(&topo, 7);
        sim.install_server("server", 80, TransportParams::default());
        let dest = SimAddr { node: sim.node("server"), port: 80 };
        let path = flow_path(&sim, &["client", "rc", "rs", "server"]);
        let f = sim.add_flow("client", dest, path.clone(), TransportParams::default(), 1_000_000, 0, 0);
        sim.run_until_idle();
        let flow = &sim.flows[f];
        assert_eq!(flow.state, FlowState::Done);
        assert_eq!(flow.digest(), expected_digest(1_000_000));

        let scen = Scenario::new(
            topo.clone(),
            Strategy::NosplitRelay,
            vec!["client".into(), "rc".into(), "rs".into(), "server".into()],
            1_000_000,
        );
        let analytic = timing(&scen).unwrap();
        assert!((flow.ttfb_ms() - analytic.ttfb_ms()).abs() < 1.0);
        assert!(
            (flow.completion_ms() - analytic.completion_ms()).abs() < 10.0,
            "completion sim {} vs analytic {}",
            flow.completion_ms(),
            analytic.completion_ms()
        );
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let topo = reference_topology();
        let run = |seed| {
            let mut sim = Sim::new(&topo, seed);
            sim.install_server("server", 80, TransportParams::default());
            let dest = SimAddr { node: sim.node("server"), port: 80 };
            let path = flow_path(&sim, &["client", "server"]);
            let f = sim.add_flow("client", dest, path, TransportParams::default(), 500_000, 0, 0);
            sim.run_until_idle();
            (sim.flows[f].eof_ns, sim.flows[f].digest(), sim.events_processed())
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn lossy_link_still_completes_with_correct_bytes() {
        let mut topo = reference_topology();
        for l in &mut topo.links {
            l.loss_rate = 0.02;
        }
        let mut sim = Sim::new(&topo, 11);
        sim.install_server("server", 80, TransportParams::default());
        let dest = SimAddr { node: sim.node("server"), port: 80 };
        let path = flow_path(&sim, &["client", "server"]);
        let f = sim.add_flow("client", dest, path, TransportParams::default(), 300_000, 0, 0);
        sim.run_until_idle();
        let flow = &sim.flows[f];
        assert_eq!(flow.state, FlowState::Done);
        assert_eq!(flow.bytes_received, 300_000);
        assert_eq!(flow.digest(), expected_digest(300_000));
        assert!(sim.link_drops() > 0, "expected some loss");
    }

    #[test]
    fn small_receive_window_caps_throughput() {
        let topo = reference_topology();
        let mut sim = Sim::new(&topo, 3);
        sim.install_server("server", 80, TransportParams::default());
        let dest = SimAddr { node: sim.node("server"), port: 80 };
        let path = flow_path(&sim, &["client", "server"]);
        let params = TransportParams { rwnd: 64 * 1024, ..TransportParams::default() };
        let f = sim.add_flow("client", dest, path, params, 5_000_000, 0, 0);
        sim.run_until_idle();
        let flow = &sim.flows[f];
        assert_eq!(flow.state, FlowState::Done);
        // rwnd / RTT with RTT 290 ms: ~226 KB/s, so 5 MB takes >= 20 s.
        let rate = flow.bytes_received as f64 / (flow.completion_ms() / 1e3);
        let cap = 64.0 * 1024.0 / 0.290;
        assert!(rate < cap * 1.1, "rate {rate} should sit under the rwnd cap {cap}");
        assert!(rate > cap * 0.8, "rate {rate} suspiciously far below cap {cap}");
    }

    #[test]
    fn probes_measure_path_rtt_and_losses_fail_samples() {
        let topo = reference_topology();
        let mut sim = Sim::new(&topo, 5);
        let path = flow_path(&sim, &["client", "rc"]);
        let b = sim.add_probes(path, 20, 100 * 1_000_000);
        sim.run_until_idle();
        let samples = sim.probe_samples_ms(b);
        assert_eq!(samples.len(), 20);
        let min = samples.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 32.7).abs() < 0.1, "min rtt {min}");

        let mut lossy = reference_topology();
        for l in &mut lossy.links {
            l.loss_rate = 0.5;
        }
        let mut sim = Sim::new(&lossy, 5);
        let path = flow_path(&sim, &["client", "rc"]);
        let b = sim.add_probes(path, 20, 100 * 1_000_000);
        sim.run_until_idle();
        let samples = sim.probe_samples_ms(b);
        assert!(samples.iter().any(|s| s.is_none()), "expected failed probe samples");
    }

    #[test]
    fn run_is_bounded_in_time() {
        // Guards against event-loop leaks: a finished transfer drains the heap.
        let topo = reference_topology();
        let mut sim = Sim::new(&topo, 1);
        sim.install_server("server", 80, TransportParams::default());
        let dest = SimAddr { node: sim.node("server"), port: 80 };
        let path = flow_path(&sim, &["client", "server"]);
        sim.add_flow("client", dest, path, TransportParams::default(), 10_000, 0, 0);
        sim.run_until_idle();
        assert!(sim.now_ns < 600 * SEC);
    }
}
