//! Virtual USB 2.0 bus with two root ports.
//!
//! Devices plug in as [`DeviceModel`] trait objects. The host side drives
//! enumeration (address assignment, descriptor retrieval, configuration)
//! and then issues control and bulk transfers by address. Transfers to the
//! same device are serialized; the two ports run independently.

mod bus;
pub mod descriptor;

pub use bus::{
    BusConfig, BusEvent, BusEventKind, DeviceModel, EnumeratedDevice, JournalEntry, PortId,
    PortRecord, Speed, Stall, UsbBus, UsbError,
};
pub use descriptor::{
    ConfigurationDescriptor, DescriptorSet, DeviceDescriptor, Direction, EndpointDescriptor,
    InterfaceDescriptor, SetupPacket, TransferType,
};
