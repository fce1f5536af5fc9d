//! Software model of a standalone two-port USB flash-drive bridge.
//!
//! The stack is layered the way the hardware is: raw [`blockdev`] images
//! back emulated [`msc_device`] flash drives, which plug into a virtual
//! [`usb`] bus. The [`msc_host`] driver speaks Bulk-Only Transport to them
//! and exposes logical blocks to the [`fat`] filesystem driver. [`bridge`]
//! owns both ports and runs copy jobs between them.

pub mod blockdev;
pub mod usb;
pub mod msc_device;
pub mod msc_host;
pub mod fat;
pub mod bridge;
