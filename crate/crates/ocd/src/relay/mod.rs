//! Split-connection relay: wire preamble, configuration, the sans-IO
//! forwarding engine, and the worker thread pool. The socket driver lives
//! in [`socket`]; the network lab has its own driver for the same engine.

pub mod config;
pub mod engine;
pub mod pool;
pub mod preamble;
pub mod socket;

pub use config::{ConfigError, ForwardRule, RelayConfig, RouteRule};
pub use engine::{Cmd, ConnId, ConnKind, DialPurpose, DialToken, RelayEngine, RelayStatus};
pub use pool::WorkerPool;
pub use preamble::{decode_preamble, encode_preamble, PreambleError, MAGIC};
