//! Relay configuration.

use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureSet, TransportParams};

/// Maps an accept port to the destination of the second leg, optionally via
/// a peer relay (the user-space stand-in for packet redirection rules).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRule {
    pub listen_port: u16,
    pub dest: SocketAddr,
    pub via: Option<SocketAddr>,
}

impl RouteRule {
    /// Parses `<listen_port>=<dest_addr:port>[,via=<peer_addr:port>]`.
    pub fn parse(s: &str) -> Result<RouteRule, ConfigError> {
        let (port, rest) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::BadRoute(s.to_string()))?;
        let listen_port = port
            .trim()
            .parse()
            .map_err(|_| ConfigError::BadRoute(s.to_string()))?;
        let (dest_s, via_s) = match rest.split_once(",via=") {
            Some((d, v)) => (d, Some(v)),
            None => (rest, None),
        };
        let dest = dest_s
            .trim()
            .parse()
            .map_err(|_| ConfigError::BadRoute(s.to_string()))?;
        let via = match via_s {
            Some(v) => {
                Some(v.trim().parse().map_err(|_| ConfigError::BadRoute(s.to_string()))?)
            }
            None => None,
        };
        Ok(RouteRule { listen_port, dest, via })
    }
}

/// Next-hop rule applied to preamble-decoded destinations, for chains of
/// more than two relays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardRule {
    pub dest: SocketAddr,
    pub via: SocketAddr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelayConfig {
    /// Address whose port accepts client-facing connections; routes may add
    /// more accept ports on the same address.
    pub listen: SocketAddr,
    /// Accept address for connections initiated by other relays.
    pub peer_listen: SocketAddr,
    /// Peer relays (their peer_listen addresses).
    pub peer_relays: Vec<SocketAddr>,
    pub routes: Vec<RouteRule>,
    pub forward_rules: Vec<ForwardRule>,
    pub pool_low_watermark: usize,
    pub pool_high_watermark: usize,
    pub worker_pool_size: usize,
    /// Read/write chunk for the forwarding pumps.
    pub forward_buffer: usize,
    pub features: FeatureSet,
    pub intra_cloud_params: TransportParams,
    pub external_params: TransportParams,
    pub fork_delay_ms: f64,
}

pub const DEFAULT_FORWARD_BUFFER: usize = 16 * 1024;

impl RelayConfig {
    pub fn new(listen: SocketAddr, peer_listen: SocketAddr) -> RelayConfig {
        RelayConfig {
            listen,
            peer_listen,
            peer_relays: Vec::new(),
            routes: Vec::new(),
            forward_rules: Vec::new(),
            pool_low_watermark: 4,
            pool_high_watermark: 16,
            worker_pool_size: 8,
            forward_buffer: DEFAULT_FORWARD_BUFFER,
            features: FeatureSet::default(),
            intra_cloud_params: TransportParams::turbo(),
            external_params: TransportParams::default(),
            fork_delay_ms: crate::timing::DEFAULT_FORK_DELAY_MS,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pool_low_watermark > self.pool_high_watermark {
            return Err(ConfigError::Watermarks {
                low: self.pool_low_watermark,
                high: self.pool_high_watermark,
            });
        }
        if self.forward_buffer < 4096 {
            return Err(ConfigError::ForwardBufferTooSmall(self.forward_buffer));
        }
        if self.features.connection_pool && self.peer_relays.is_empty() {
            let needs_peer = self.routes.iter().any(|r| r.via.is_some());
            if needs_peer {
                return Err(ConfigError::PoolWithoutPeers);
            }
        }
        // Internet-facing legs stay friendly: no turbo parameters there.
        if self.external_params.turbo_start
            || self.external_params.init_cwnd != TransportParams::default().init_cwnd
        {
            return Err(ConfigError::UnfriendlyExternalParams);
        }
        Ok(())
    }

    pub fn route_for_port(&self, port: u16) -> Option<&RouteRule> {
        self.routes.iter().find(|r| r.listen_port == port)
    }

    pub fn forward_via(&self, dest: SocketAddr) -> Option<SocketAddr> {
        self.forward_rules.iter().find(|r| r.dest == dest).map(|r| r.via)
    }

    /// Every port the relay accepts on: the base listener, one per route,
    /// and the peer listener.
    pub fn accept_ports(&self) -> Vec<u16> {
        let mut ports = vec![self.listen.port()];
        for r in &self.routes {
            if !ports.contains(&r.listen_port) {
                ports.push(r.listen_port);
            }
        }
        ports
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("bad route spec {0:?}, expected <port>=<addr:port>[,via=<addr:port>]")]
    BadRoute(String),
    #[error("pool watermarks inverted: low {low} > high {high}")]
    Watermarks { low: usize, high: usize },
    #[error("forward buffer {0} below the 4096-byte floor")]
    ForwardBufferTooSmall(usize),
    #[error("connection_pool requires declared peer relays")]
    PoolWithoutPeers,
    #[error("external params must stay at system defaults")]
    UnfriendlyExternalParams,
}
