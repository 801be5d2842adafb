//! The relay engine as a driver-independent state machine. Drivers (real
//! sockets, the network lab) feed connection events in and execute the
//! commands that come back out, so the same splitting/forwarding logic runs
//! over both transports.
//!
//! Behavior per incoming connection:
//!  - destination comes from the route table (client-facing ports) or from
//!    the decoded preamble (relay-to-relay ports);
//!  - with early_syn the upstream dial starts as soon as the connection
//!    attempt is observed, otherwise only when the first payload arrives;
//!  - with connection_pool and a peer-relay next hop, a pre-established
//!    connection is claimed and the preamble written immediately; an empty
//!    pool falls back to a fresh dial;
//!  - each direction is pumped independently; end-of-stream on one side is
//!    flushed and then propagated as a half-close, errors flush and reset.

use std::collections::HashMap;
use std::net::SocketAddr;

use crate::model::TransportParams;
use crate::relay::config::RelayConfig;
use crate::relay::preamble::{decode_preamble, encode_preamble};

pub type ConnId = u64;
pub type DialToken = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DialPurpose {
    /// Upstream leg of an active split connection.
    Active,
    /// Pre-established pooled connection to a peer relay.
    Pool,
}

/// What the driver must do. `Dial` carries the final destination as
/// metadata so transports that can observe connection attempts (the lab's
/// SYN hook) can propagate it; socket drivers ignore it.
#[derive(Debug, Clone, PartialEq)]
pub enum Cmd {
    Dial {
        token: DialToken,
        dest: SocketAddr,
        params: TransportParams,
        final_dest: Option<SocketAddr>,
        purpose: DialPurpose,
    },
    Send { conn: ConnId, data: Vec<u8> },
    ShutdownWrite { conn: ConnId },
    Reset { conn: ConnId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnKind {
    /// Accepted on a client-facing port; destination from the route table.
    ProxyDown,
    /// Accepted on the peer port; destination from the preamble.
    PeerDown,
    /// Dialed by this relay.
    Upstream,
}

#[derive(Debug, Default)]
struct ConnState {
    kind: Option<ConnKind>,
    established: bool,
    /// Established and (for peer legs) preamble written: app bytes may flow.
    ready: bool,
    peer: Option<ConnId>,
    /// Bytes received on this connection while its peer is unknown.
    inbox: Vec<u8>,
    /// Bytes to write once this connection becomes ready.
    pending_out: Vec<u8>,
    pending_shutdown: bool,
    pending_reset: bool,
    expects_preamble: bool,
    preamble_in: Vec<u8>,
    preamble_done: bool,
    dest: Option<SocketAddr>,
    via: Option<SocketAddr>,
    upstream_started: bool,
    read_eof: bool,
    closed: bool,
    pooled_idle: bool,
    pool_peer: Option<SocketAddr>,
    internet_facing: bool,
    turbo: bool,
    bytes_in: u64,
    bytes_out: u64,
}

#[derive(Debug)]
struct PendingDial {
    purpose: DialPurpose,
    downstream: Option<ConnId>,
    /// Preamble to write on the new leg once it is up.
    preamble_dest: Option<SocketAddr>,
    pool_peer: Option<SocketAddr>,
    internet_facing: bool,
    turbo: bool,
}

#[derive(Debug, Default)]
struct PoolState {
    idle: Vec<ConnId>,
    pending: usize,
    claimed: u64,
    fallback_fresh_dials: u64,
}

#[derive(Debug, Clone)]
pub struct PoolStatus {
    pub peer: SocketAddr,
    pub idle: usize,
    pub pending: usize,
    pub claimed: u64,
    pub fallback_fresh_dials: u64,
}

#[derive(Debug, Clone)]
pub struct ConnStatus {
    pub id: ConnId,
    pub kind: ConnKind,
    pub established: bool,
    pub internet_facing: bool,
    pub turbo: bool,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone)]
pub struct RelayStatus {
    pub pools: Vec<PoolStatus>,
    pub conns: Vec<ConnStatus>,
    pub fresh_dials: u64,
}

pub struct RelayEngine {
    pub cfg: RelayConfig,
    conns: HashMap<ConnId, ConnState>,
    dials: HashMap<DialToken, PendingDial>,
    pools: HashMap<SocketAddr, PoolState>,
    next_token: DialToken,
    fresh_dials: u64,
}

impl RelayEngine {
    pub fn new(cfg: RelayConfig) -> RelayEngine {
        RelayEngine {
            cfg,
            conns: HashMap::new(),
            dials: HashMap::new(),
            pools: HashMap::new(),
            next_token: 1,
            fresh_dials: 0,
        }
    }

    /// Startup commands: pre-fill the connection pool to the low watermark
    /// for every declared peer.
    pub fn start(&mut self) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        if self.cfg.features.connection_pool {
            for peer in self.cfg.peer_relays.clone() {
                self.pools.entry(peer).or_default();
                self.refill_pool(peer, &mut cmds);
            }
        }
        cmds
    }

    fn params_for_leg(&self, peer_leg: bool) -> TransportParams {
        if peer_leg && self.cfg.features.turbo_start {
            self.cfg.intra_cloud_params
        } else {
            self.cfg.external_params
        }
    }

    fn refill_pool(&mut self, peer: SocketAddr, cmds: &mut Vec<Cmd>) {
        let params = self.params_for_leg(true);
        let low = self.cfg.pool_low_watermark;
        let pool = self.pools.entry(peer).or_default();
        while pool.idle.len() + pool.pending < low {
            pool.pending += 1;
            let token = self.next_token;
            self.next_token += 1;
            self.dials.insert(
                token,
                PendingDial {
                    purpose: DialPurpose::Pool,
                    downstream: None,
                    preamble_dest: None,
                    pool_peer: Some(peer),
                    internet_facing: false,
                    turbo: params.turbo_start,
                },
            );
            cmds.push(Cmd::Dial {
                token,
                dest: peer,
                params,
                final_dest: None,
                purpose: DialPurpose::Pool,
            });
        }
    }

    /// A connection attempt was observed (SYN over the lab transport,
    /// accept over sockets). `hint` carries the final destination when the
    /// transport can see it before any payload.
    pub fn on_conn_attempt(
        &mut self,
        conn: ConnId,
        local_port: u16,
        hint: Option<SocketAddr>,
    ) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        let peer_port = self.cfg.peer_listen.port();
        let mut st = ConnState { internet_facing: true, ..ConnState::default() };
        if local_port == peer_port {
            st.kind = Some(ConnKind::PeerDown);
            st.expects_preamble = true;
            st.internet_facing = false;
            if let Some(d) = hint {
                st.dest = Some(d);
                st.via = self.cfg.forward_via(d);
            }
        } else {
            st.kind = Some(ConnKind::ProxyDown);
            if let Some(rule) = self.cfg.route_for_port(local_port) {
                st.dest = Some(rule.dest);
                st.via = rule.via;
            } else if let Some(d) = hint {
                st.dest = Some(d);
                st.via = self.cfg.forward_via(d);
            }
        }
        let dial_now = self.cfg.features.early_syn && st.dest.is_some();
        self.conns.insert(conn, st);
        if dial_now {
            self.start_upstream(conn, &mut cmds);
        }
        cmds
    }

    /// Downstream handshake completed; buffered writes may flush.
    pub fn on_established(&mut self, conn: ConnId) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        if let Some(st) = self.conns.get_mut(&conn) {
            st.established = true;
            self.make_ready(conn, &mut cmds);
        }
        cmds
    }

    pub fn on_dial_result(
        &mut self,
        token: DialToken,
        result: Result<ConnId, String>,
    ) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        let Some(dial) = self.dials.remove(&token) else {
            return cmds;
        };
        match (dial.purpose, result) {
            (DialPurpose::Pool, Ok(conn)) => {
                let peer = dial.pool_peer.expect("pool dial has a peer");
                self.conns.insert(
                    conn,
                    ConnState {
                        kind: Some(ConnKind::Upstream),
                        established: true,
                        ready: true,
                        pooled_idle: true,
                        pool_peer: Some(peer),
                        internet_facing: false,
                        turbo: dial.turbo,
                        ..ConnState::default()
                    },
                );
                let pool = self.pools.entry(peer).or_default();
                pool.pending = pool.pending.saturating_sub(1);
                pool.idle.push(conn);
            }
            (DialPurpose::Pool, Err(_)) => {
                if let Some(peer) = dial.pool_peer {
                    let pool = self.pools.entry(peer).or_default();
                    pool.pending = pool.pending.saturating_sub(1);
                }
            }
            (DialPurpose::Active, Ok(conn)) => {
                self.conns.insert(
                    conn,
                    ConnState {
                        kind: Some(ConnKind::Upstream),
                        established: true,
                        internet_facing: dial.internet_facing,
                        turbo: dial.turbo,
                        ..ConnState::default()
                    },
                );
                if let Some(dest) = dial.preamble_dest {
                    let data = encode_preamble(dest);
                    self.conns.get_mut(&conn).unwrap().bytes_out += data.len() as u64;
                    cmds.push(Cmd::Send { conn, data });
                }
                if let Some(down) = dial.downstream {
                    self.link(down, conn, &mut cmds);
                }
                self.make_ready_now(conn, &mut cmds);
            }
            (DialPurpose::Active, Err(_)) => {
                // Upstream unreachable: reset the downstream side.
                if let Some(down) = dial.downstream {
                    self.reset_conn(down, &mut cmds);
                }
            }
        }
        cmds
    }

    pub fn on_data(&mut self, conn: ConnId, data: &[u8]) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        let Some(st) = self.conns.get_mut(&conn) else {
            return cmds;
        };
        if st.closed {
            return cmds;
        }
        st.bytes_in += data.len() as u64;
        if st.expects_preamble && !st.preamble_done {
            st.preamble_in.extend_from_slice(data);
            match decode_preamble(&st.preamble_in) {
                Ok(None) => return cmds,
                Err(_) => {
                    self.reset_conn(conn, &mut cmds);
                    return cmds;
                }
                Ok(Some((dest, used))) => {
                    let rest = st.preamble_in.split_off(used);
                    st.preamble_in.clear();
                    st.preamble_done = true;
                    if st.upstream_started {
                        // Early dial from the attempt hint: the preamble is
                        // authoritative and must agree.
                        if st.dest != Some(dest) {
                            self.reset_conn(conn, &mut cmds);
                            return cmds;
                        }
                    } else {
                        st.dest = Some(dest);
                        st.via = self.cfg.forward_via(dest);
                        self.start_upstream(conn, &mut cmds);
                    }
                    if !rest.is_empty() {
                        self.forward(conn, &rest, &mut cmds);
                    }
                    return cmds;
                }
            }
        }
        if !st.upstream_started && st.kind != Some(ConnKind::Upstream) && st.peer.is_none() {
            // No early dial: the first payload bytes trigger the upstream leg.
            let has_dest = st.dest.is_some();
            if has_dest {
                self.start_upstream(conn, &mut cmds);
            }
        }
        self.forward(conn, data, &mut cmds);
        cmds
    }

    pub fn on_eof(&mut self, conn: ConnId) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        let Some(st) = self.conns.get_mut(&conn) else {
            return cmds;
        };
        st.read_eof = true;
        if st.pooled_idle {
            // Peer closed a pooled connection under us; replace it.
            st.closed = true;
            let peer = st.pool_peer;
            if let Some(peer) = peer {
                if let Some(pool) = self.pools.get_mut(&peer) {
                    pool.idle.retain(|c| *c != conn);
                }
                self.refill_pool(peer, &mut cmds);
            }
            return cmds;
        }
        if let Some(p) = st.peer {
            self.shutdown_peer(p, &mut cmds);
        }
        cmds
    }

    pub fn on_reset(&mut self, conn: ConnId) -> Vec<Cmd> {
        let mut cmds = Vec::new();
        let Some(st) = self.conns.get_mut(&conn) else {
            return cmds;
        };
        if st.closed {
            return cmds;
        }
        st.closed = true;
        if st.pooled_idle {
            let peer = st.pool_peer;
            if let Some(peer) = peer {
                if let Some(pool) = self.pools.get_mut(&peer) {
                    pool.idle.retain(|c| *c != conn);
                }
                self.refill_pool(peer, &mut cmds);
            }
            return cmds;
        }
        let peer = st.peer;
        if let Some(p) = peer {
            // Flush whatever already arrived, then reset.
            if let Some(ps) = self.conns.get_mut(&p) {
                if ps.ready {
                    if !ps.pending_out.is_empty() {
                        let data = std::mem::take(&mut ps.pending_out);
                        ps.bytes_out += data.len() as u64;
                        cmds.push(Cmd::Send { conn: p, data });
                    }
                    ps.closed = true;
                    cmds.push(Cmd::Reset { conn: p });
                } else {
                    ps.pending_reset = true;
                }
            }
        }
        cmds
    }

    fn start_upstream(&mut self, conn: ConnId, cmds: &mut Vec<Cmd>) {
        let (dest, via) = {
            let st = self.conns.get_mut(&conn).unwrap();
            if st.upstream_started || st.dest.is_none() {
                return;
            }
            st.upstream_started = true;
            (st.dest.unwrap(), st.via)
        };
        let peer_leg = via.is_some();
        let target = via.unwrap_or(dest);
        if peer_leg && self.cfg.features.connection_pool {
            let claimed = {
                let pool = self.pools.entry(target).or_default();
                let c = pool.idle.pop();
                if c.is_some() {
                    pool.claimed += 1;
                } else {
                    pool.fallback_fresh_dials += 1;
                }
                c
            };
            if let Some(up) = claimed {
                self.refill_pool(target, cmds);
                {
                    let ust = self.conns.get_mut(&up).unwrap();
                    ust.pooled_idle = false;
                    let data = encode_preamble(dest);
                    ust.bytes_out += data.len() as u64;
                    cmds.push(Cmd::Send { conn: up, data });
                }
                self.link(conn, up, cmds);
                return;
            }
        }
        let params = self.params_for_leg(peer_leg);
        let token = self.next_token;
        self.next_token += 1;
        self.fresh_dials += 1;
        self.dials.insert(
            token,
            PendingDial {
                purpose: DialPurpose::Active,
                downstream: Some(conn),
                preamble_dest: if peer_leg { Some(dest) } else { None },
                pool_peer: None,
                internet_facing: !peer_leg,
                turbo: params.turbo_start,
            },
        );
        cmds.push(Cmd::Dial {
            token,
            dest: target,
            params,
            final_dest: if peer_leg { Some(dest) } else { None },
            purpose: DialPurpose::Active,
        });
    }

    fn link(&mut self, a: ConnId, b: ConnId, cmds: &mut Vec<Cmd>) {
        self.conns.get_mut(&a).unwrap().peer = Some(b);
        self.conns.get_mut(&b).unwrap().peer = Some(a);
        for (from, to) in [(a, b), (b, a)] {
            let inbox = std::mem::take(&mut self.conns.get_mut(&from).unwrap().inbox);
            if !inbox.is_empty() {
                self.queue_or_send(to, &inbox, cmds);
            }
            if self.conns.get(&from).unwrap().read_eof {
                self.shutdown_peer(to, cmds);
            }
        }
    }

    fn forward(&mut self, from: ConnId, data: &[u8], cmds: &mut Vec<Cmd>) {
        if data.is_empty() {
            return;
        }
        let peer = self.conns.get(&from).and_then(|s| s.peer);
        match peer {
            Some(p) => self.queue_or_send(p, data, cmds),
            None => {
                self.conns.get_mut(&from).unwrap().inbox.extend_from_slice(data);
            }
        }
    }

    fn queue_or_send(&mut self, conn: ConnId, data: &[u8], cmds: &mut Vec<Cmd>) {
        let st = self.conns.get_mut(&conn).unwrap();
        if st.closed {
            return;
        }
        if st.ready {
            st.bytes_out += data.len() as u64;
            cmds.push(Cmd::Send { conn, data: data.to_vec() });
        } else {
            st.pending_out.extend_from_slice(data);
        }
    }

    fn shutdown_peer(&mut self, conn: ConnId, cmds: &mut Vec<Cmd>) {
        let st = self.conns.get_mut(&conn).unwrap();
        if st.closed {
            return;
        }
        if st.ready {
            if !st.pending_out.is_empty() {
                let data = std::mem::take(&mut st.pending_out);
                st.bytes_out += data.len() as u64;
                cmds.push(Cmd::Send { conn, data });
            }
            cmds.push(Cmd::ShutdownWrite { conn });
        } else {
            st.pending_shutdown = true;
        }
    }

    fn make_ready_now(&mut self, conn: ConnId, cmds: &mut Vec<Cmd>) {
        self.make_ready(conn, cmds);
    }

    fn make_ready(&mut self, conn: ConnId, cmds: &mut Vec<Cmd>) {
        let st = self.conns.get_mut(&conn).unwrap();
        if st.ready || !st.established || st.closed {
            return;
        }
        st.ready = true;
        if !st.pending_out.is_empty() {
            let data = std::mem::take(&mut st.pending_out);
            st.bytes_out += data.len() as u64;
            cmds.push(Cmd::Send { conn, data });
        }
        if st.pending_shutdown {
            st.pending_shutdown = false;
            cmds.push(Cmd::ShutdownWrite { conn });
        }
        if st.pending_reset {
            st.pending_reset = false;
            st.closed = true;
            cmds.push(Cmd::Reset { conn });
        }
    }

    fn reset_conn(&mut self, conn: ConnId, cmds: &mut Vec<Cmd>) {
        let peer = {
            let st = self.conns.get_mut(&conn).unwrap();
            if st.closed {
                return;
            }
            st.closed = true;
            cmds.push(Cmd::Reset { conn });
            st.peer
        };
        if let Some(p) = peer {
            let ps = self.conns.get_mut(&p).unwrap();
            if !ps.closed {
                if ps.ready {
                    if !ps.pending_out.is_empty() {
                        let data = std::mem::take(&mut ps.pending_out);
                        ps.bytes_out += data.len() as u64;
                        cmds.push(Cmd::Send { conn: p, data });
                    }
                    ps.closed = true;
                    cmds.push(Cmd::Reset { conn: p });
                } else {
                    ps.pending_reset = true;
                }
            }
        }
    }

    pub fn status(&self) -> RelayStatus {
        let mut pools: Vec<PoolStatus> = self
            .pools
            .iter()
            .map(|(peer, p)| PoolStatus {
                peer: *peer,
                idle: p.idle.len(),
                pending: p.pending,
                claimed: p.claimed,
                fallback_fresh_dials: p.fallback_fresh_dials,
            })
            .collect();
        pools.sort_by_key(|p| p.peer);
        let mut conns: Vec<ConnStatus> = self
            .conns
            .iter()
            .filter(|(_, s)| !s.closed)
            .map(|(id, s)| ConnStatus {
                id: *id,
                kind: s.kind.unwrap_or(ConnKind::Upstream),
                established: s.established,
                internet_facing: s.internet_facing,
                turbo: s.turbo,
                bytes_in: s.bytes_in,
                bytes_out: s.bytes_out,
            })
            .collect();
        conns.sort_by_key(|c| c.id);
        RelayStatus { pools, conns, fresh_dials: self.fresh_dials }
    }

    pub fn pool_idle_total(&self) -> usize {
        self.pools.values().map(|p| p.idle.len()).sum()
    }
}
