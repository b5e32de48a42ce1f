//! Host-side pieces around `offload-core`: TCP transport, the worker
//! service and its store, the client state directory, file formats,
//! reporting, and the bundled toy models.

pub mod cputime;
pub mod files;
pub mod net;
pub mod report;
pub mod server;
pub mod state;
pub mod toy;
