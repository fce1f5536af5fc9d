//! Operator surfaces over the bridge: the `usbbridge` command line and the
//! local HTTP service with its server-sent event stream.

pub mod api;
pub mod cli;
pub mod state;
