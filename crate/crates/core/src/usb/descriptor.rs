//! Standard USB descriptors and setup packets, little-endian on the wire.

use serde::Serialize;
use thiserror::Error;

pub const DESC_DEVICE: u8 = 0x01;
pub const DESC_CONFIGURATION: u8 = 0x02;
pub const DESC_STRING: u8 = 0x03;
pub const DESC_INTERFACE: u8 = 0x04;
pub const DESC_ENDPOINT: u8 = 0x05;

pub const DEVICE_DESC_LEN: usize = 18;
pub const CONFIG_DESC_LEN: usize = 9;
pub const INTERFACE_DESC_LEN: usize = 9;
pub const ENDPOINT_DESC_LEN: usize = 7;

pub const CLASS_MASS_STORAGE: u8 = 0x08;
pub const SUBCLASS_SCSI: u8 = 0x06;
pub const SUBCLASS_ATAPI: u8 = 0x05;
pub const PROTOCOL_BULK_ONLY: u8 = 0x50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("malformed-descriptor: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> DescriptorError {
    DescriptorError::Malformed(msg.into())
}

fn le16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeviceDescriptor {
    pub usb_version: u16,
    pub class: u8,
    pub subclass: u8,
    pub protocol: u8,
    pub max_packet_size0: u8,
    pub vendor_id: u16,
    pub product_id: u16,
    pub device_version: u16,
    pub manufacturer_index: u8,
    pub product_index: u8,
    pub serial_index: u8,
    pub num_configurations: u8,
}

impl DeviceDescriptor {
    pub fn to_bytes(&self) -> [u8; DEVICE_DESC_LEN] {
        let mut b = [0u8; DEVICE_DESC_LEN];
        b[0] = DEVICE_DESC_LEN as u8;
        b[1] = DESC_DEVICE;
        b[2..4].copy_from_slice(&self.usb_version.to_le_bytes());
        b[4] = self.class;
        b[5] = self.subclass;
        b[6] = self.protocol;
        b[7] = self.max_packet_size0;
        b[8..10].copy_from_slice(&self.vendor_id.to_le_bytes());
        b[10..12].copy_from_slice(&self.product_id.to_le_bytes());
        b[12..14].copy_from_slice(&self.device_version.to_le_bytes());
        b[14] = self.manufacturer_index;
        b[15] = self.product_index;
        b[16] = self.serial_index;
        b[17] = self.num_configurations;
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, DescriptorError> {
        if b.len() != DEVICE_DESC_LEN || b[0] as usize != DEVICE_DESC_LEN {
            return Err(malformed(format!(
                "device descriptor length {} (bLength {})",
                b.len(),
                b.first().copied().unwrap_or(0)
            )));
        }
        if b[1] != DESC_DEVICE {
            return Err(malformed(format!("device descriptor type {:#04x}", b[1])));
        }
        Ok(DeviceDescriptor {
            usb_version: le16(b, 2),
            class: b[4],
            subclass: b[5],
            protocol: b[6],
            max_packet_size0: b[7],
            vendor_id: le16(b, 8),
            product_id: le16(b, 10),
            device_version: le16(b, 12),
            manufacturer_index: b[14],
            product_index: b[15],
            serial_index: b[16],
            num_configurations: b[17],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferType {
    Control,
    Isochronous,
    Bulk,
    Interrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EndpointDescriptor {
    /// Endpoint address including the direction bit (0x80 = IN).
    pub address: u8,
    pub transfer_type: TransferType,
    pub max_packet_size: u16,
    pub interval: u8,
}

impl EndpointDescriptor {
    pub fn bulk(address: u8, max_packet_size: u16) -> Self {
        EndpointDescriptor {
            address,
            transfer_type: TransferType::Bulk,
            max_packet_size,
            interval: 0,
        }
    }

    pub fn direction(&self) -> Direction {
        if self.address & 0x80 != 0 {
            Direction::In
        } else {
            Direction::Out
        }
    }

    pub fn number(&self) -> u8 {
        self.address & 0x0F
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(ENDPOINT_DESC_LEN as u8);
        out.push(DESC_ENDPOINT);
        out.push(self.address);
        out.push(match self.transfer_type {
            TransferType::Control => 0,
            TransferType::Isochronous => 1,
            TransferType::Bulk => 2,
            TransferType::Interrupt => 3,
        });
        out.extend_from_slice(&self.max_packet_size.to_le_bytes());
        out.push(self.interval);
    }

    fn parse(b: &[u8]) -> Self {
        EndpointDescriptor {
            address: b[2],
            transfer_type: match b[3] & 0x03 {
                0 => TransferType::Control,
                1 => TransferType::Isochronous,
                2 => TransferType::Bulk,
                _ => TransferType::Interrupt,
            },
            max_packet_size: le16(b, 4),
            interval: b[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InterfaceDescriptor {
    pub number: u8,
    pub alternate_setting: u8,
    pub class: u8,
    pub subclass: u8,
    pub protocol: u8,
    pub string_index: u8,
    pub endpoints: Vec<EndpointDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigurationDescriptor {
    pub value: u8,
    pub string_index: u8,
    pub attributes: u8,
    /// In 2 mA units.
    pub max_power: u8,
    pub interfaces: Vec<InterfaceDescriptor>,
}

impl ConfigurationDescriptor {
    pub fn total_length(&self) -> usize {
        CONFIG_DESC_LEN
            + self
                .interfaces
                .iter()
                .map(|i| INTERFACE_DESC_LEN + ENDPOINT_DESC_LEN * i.endpoints.len())
                .sum::<usize>()
    }

    /// Header plus all interface and endpoint descriptors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let total = self.total_length();
        let mut out = Vec::with_capacity(total);
        out.push(CONFIG_DESC_LEN as u8);
        out.push(DESC_CONFIGURATION);
        out.extend_from_slice(&(total as u16).to_le_bytes());
        out.push(self.interfaces.len() as u8);
        out.push(self.value);
        out.push(self.string_index);
        out.push(self.attributes);
        out.push(self.max_power);
        for intf in &self.interfaces {
            out.push(INTERFACE_DESC_LEN as u8);
            out.push(DESC_INTERFACE);
            out.push(intf.number);
            out.push(intf.alternate_setting);
            out.push(intf.endpoints.len() as u8);
            out.push(intf.class);
            out.push(intf.subclass);
            out.push(intf.protocol);
            out.push(intf.string_index);
            for ep in &intf.endpoints {
                ep.write(&mut out);
            }
        }
        out
    }

    /// Parses a full configuration blob. `wTotalLength` must equal the blob
    /// length and every contained descriptor's `bLength` must match its type.
    pub fn parse(b: &[u8]) -> Result<Self, DescriptorError> {
        if b.len() < CONFIG_DESC_LEN || b[0] as usize != CONFIG_DESC_LEN {
            return Err(malformed("configuration header length"));
        }
        if b[1] != DESC_CONFIGURATION {
            return Err(malformed(format!("configuration type {:#04x}", b[1])));
        }
        let total = le16(b, 2) as usize;
        if total != b.len() {
            return Err(malformed(format!(
                "configuration total length {} but {} bytes present",
                total,
                b.len()
            )));
        }
        let num_interfaces = b[4];
        let mut cfg = ConfigurationDescriptor {
            value: b[5],
            string_index: b[6],
            attributes: b[7],
            max_power: b[8],
            interfaces: Vec::new(),
        };
        let mut pending_eps = 0u8;
        let mut off = CONFIG_DESC_LEN;
        while off < b.len() {
            let len = b[off] as usize;
            if len < 2 || off + len > b.len() {
                return Err(malformed(format!("descriptor at offset {off} has length {len}")));
            }
            let d = &b[off..off + len];
            match d[1] {
                DESC_INTERFACE => {
                    if len != INTERFACE_DESC_LEN {
                        return Err(malformed(format!("interface descriptor length {len}")));
                    }
                    if pending_eps != 0 {
                        return Err(malformed("interface ended before all endpoints"));
                    }
                    pending_eps = d[4];
                    cfg.interfaces.push(InterfaceDescriptor {
                        number: d[2],
                        alternate_setting: d[3],
                        class: d[5],
                        subclass: d[6],
                        protocol: d[7],
                        string_index: d[8],
                        endpoints: Vec::new(),
                    });
                }
                DESC_ENDPOINT => {
                    if len != ENDPOINT_DESC_LEN {
                        return Err(malformed(format!("endpoint descriptor length {len}")));
                    }
                    let intf = cfg
                        .interfaces
                        .last_mut()
                        .ok_or_else(|| malformed("endpoint before interface"))?;
                    if pending_eps == 0 {
                        return Err(malformed("more endpoints than bNumEndpoints"));
                    }
                    pending_eps -= 1;
                    intf.endpoints.push(EndpointDescriptor::parse(d));
                }
                // Class-specific and vendor descriptors are skipped.
                _ => {}
            }
            off += len;
        }
        if pending_eps != 0 {
            return Err(malformed("fewer endpoints than bNumEndpoints"));
        }
        if cfg.interfaces.len() != num_interfaces as usize {
            return Err(malformed(format!(
                "bNumInterfaces {} but {} present",
                num_interfaces,
                cfg.interfaces.len()
            )));
        }
        Ok(cfg)
    }
}

/// Everything a device advertises during enumeration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DescriptorSet {
    pub device: DeviceDescriptor,
    pub configurations: Vec<ConfigurationDescriptor>,
}

impl DescriptorSet {
    pub fn find_interface(&self, class: u8) -> Option<&InterfaceDescriptor> {
        self.configurations
            .iter()
            .flat_map(|c| c.interfaces.iter())
            .find(|i| i.class == class)
    }

    pub fn endpoint(&self, address: u8) -> Option<&EndpointDescriptor> {
        self.configurations
            .iter()
            .flat_map(|c| c.interfaces.iter())
            .flat_map(|i| i.endpoints.iter())
            .find(|e| e.address == address)
    }
}

pub mod request {
    pub const GET_STATUS: u8 = 0x00;
    pub const CLEAR_FEATURE: u8 = 0x01;
    pub const SET_FEATURE: u8 = 0x03;
    pub const SET_ADDRESS: u8 = 0x05;
    pub const GET_DESCRIPTOR: u8 = 0x06;
    pub const GET_CONFIGURATION: u8 = 0x08;
    pub const SET_CONFIGURATION: u8 = 0x09;

    /// Bulk-Only Mass Storage Reset.
    pub const BOMS_RESET: u8 = 0xFF;
    pub const GET_MAX_LUN: u8 = 0xFE;

    pub const FEATURE_ENDPOINT_HALT: u16 = 0x0000;

    pub const TYPE_STANDARD_DEVICE_IN: u8 = 0x80;
    pub const TYPE_STANDARD_DEVICE_OUT: u8 = 0x00;
    pub const TYPE_STANDARD_ENDPOINT_OUT: u8 = 0x02;
    pub const TYPE_STANDARD_ENDPOINT_IN: u8 = 0x82;
    pub const TYPE_CLASS_INTERFACE_OUT: u8 = 0x21;
    pub const TYPE_CLASS_INTERFACE_IN: u8 = 0xA1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetupPacket {
    pub request_type: u8,
    pub request: u8,
    pub value: u16,
    pub index: u16,
    pub length: u16,
}

impl SetupPacket {
    pub const LEN: usize = 8;

    pub fn to_bytes(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0] = self.request_type;
        b[1] = self.request;
        b[2..4].copy_from_slice(&self.value.to_le_bytes());
        b[4..6].copy_from_slice(&self.index.to_le_bytes());
        b[6..8].copy_from_slice(&self.length.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        if b.len() != Self::LEN {
            return None;
        }
        Some(SetupPacket {
            request_type: b[0],
            request: b[1],
            value: le16(b, 2),
            index: le16(b, 4),
            length: le16(b, 6),
        })
    }

    pub fn is_device_to_host(&self) -> bool {
        self.request_type & 0x80 != 0
    }

    pub fn get_descriptor(kind: u8, index: u8, length: u16) -> Self {
        SetupPacket {
            request_type: request::TYPE_STANDARD_DEVICE_IN,
            request: request::GET_DESCRIPTOR,
            value: ((kind as u16) << 8) | index as u16,
            index: 0,
            length,
        }
    }

    pub fn set_address(address: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_STANDARD_DEVICE_OUT,
            request: request::SET_ADDRESS,
            value: address as u16,
            index: 0,
            length: 0,
        }
    }

    pub fn set_configuration(value: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_STANDARD_DEVICE_OUT,
            request: request::SET_CONFIGURATION,
            value: value as u16,
            index: 0,
            length: 0,
        }
    }

    pub fn clear_halt(endpoint: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_STANDARD_ENDPOINT_OUT,
            request: request::CLEAR_FEATURE,
            value: request::FEATURE_ENDPOINT_HALT,
            index: endpoint as u16,
            length: 0,
        }
    }

    pub fn get_endpoint_status(endpoint: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_STANDARD_ENDPOINT_IN,
            request: request::GET_STATUS,
            value: 0,
            index: endpoint as u16,
            length: 2,
        }
    }

    pub fn mass_storage_reset(interface: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_CLASS_INTERFACE_OUT,
            request: request::BOMS_RESET,
            value: 0,
            index: interface as u16,
            length: 0,
        }
    }

    pub fn get_max_lun(interface: u8) -> Self {
        SetupPacket {
            request_type: request::TYPE_CLASS_INTERFACE_IN,
            request: request::GET_MAX_LUN,
            value: 0,
            index: interface as u16,
            length: 1,
        }
    }
}

/// Encodes a string descriptor (UTF-16LE body).
pub fn string_descriptor(s: &str) -> Vec<u8> {
    let units: Vec<u16> = s.encode_utf16().collect();
    let mut out = Vec::with_capacity(2 + units.len() * 2);
    out.push((2 + units.len() * 2) as u8);
    out.push(DESC_STRING);
    for u in units {
        out.extend_from_slice(&u.to_le_bytes());
    }
    out
}
