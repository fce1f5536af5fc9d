use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::descriptor::{
    ConfigurationDescriptor, DescriptorError, DescriptorSet, DeviceDescriptor, Direction,
    SetupPacket, TransferType, CONFIG_DESC_LEN, DESC_CONFIGURATION, DESC_DEVICE, DEVICE_DESC_LEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PortId {
    A,
    B,
}

impl PortId {
    pub const ALL: [PortId; 2] = [PortId::A, PortId::B];

    pub fn index(self) -> usize {
        match self {
            PortId::A => 0,
            PortId::B => 1,
        }
    }

    pub fn other(self) -> PortId {
        match self {
            PortId::A => PortId::B,
            PortId::B => PortId::A,
        }
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PortId::A => "A",
            PortId::B => "B",
        })
    }
}

impl std::str::FromStr for PortId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(PortId::A),
            "B" | "b" => Ok(PortId::B),
            other => Err(format!("unknown port {other:?} (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Full,
    High,
}

impl Speed {
    /// Nominal signalling rate in bytes per second.
    pub fn bytes_per_second(self) -> u64 {
        match self {
            Speed::Full => 12_000_000 / 8,
            Speed::High => 480_000_000 / 8,
        }
    }
}

/// A control or bulk request the device refused by stalling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stall;

/// Device-side behaviour plugged into a port.
pub trait DeviceModel: Send {
    fn speed(&self) -> Speed {
        Speed::Full
    }

    fn control(&mut self, setup: &SetupPacket, data: &[u8]) -> Result<Vec<u8>, Stall>;

    /// Returns the number of bytes accepted.
    fn bulk_out(&mut self, endpoint: u8, data: &[u8]) -> Result<usize, Stall>;

    /// May return fewer than `max_len` bytes (short packet).
    fn bulk_in(&mut self, endpoint: u8, max_len: usize) -> Result<Vec<u8>, Stall>;

    /// Called once after the device is unplugged.
    fn on_detach(&mut self) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UsbError {
    #[error("port-occupied: port {0}")]
    PortOccupied(PortId),
    #[error("port-empty: port {0}")]
    PortEmpty(PortId),
    #[error("already enumerated at address {0}")]
    AlreadyEnumerated(u8),
    #[error("no-such-device: address {0}")]
    NoSuchDevice(u8),
    #[error("no-such-endpoint: {0:#04x}")]
    NoSuchEndpoint(u8),
    #[error("endpoint-halted: {0:#04x}")]
    EndpointHalted(u8),
    #[error("control request stalled")]
    RequestStalled,
    #[error("device-gone")]
    DeviceGone,
    #[error(transparent)]
    Malformed(#[from] DescriptorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BusEventKind {
    Attach,
    Detach,
    Enumerated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BusEvent {
    pub ts: DateTime<Utc>,
    pub port: PortId,
    pub kind: BusEventKind,
    pub address: u8,
}

impl fmt::Display for BusEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BusEventKind::Attach => "attach",
            BusEventKind::Detach => "detach",
            BusEventKind::Enumerated => "enumerated",
        };
        write!(
            f,
            "{} port={} event={} addr={}",
            self.ts.format("%Y-%m-%dT%H:%M:%S%.6fZ"),
            self.port,
            kind,
            self.address
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnumeratedDevice {
    pub port: PortId,
    pub address: u8,
    pub descriptors: DescriptorSet,
    pub speed: Speed,
}

/// Transfer journal entry, recorded only when the journal is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalEntry {
    Begin { seq: u64, port: PortId },
    End { seq: u64, port: PortId, ok: bool },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BusConfig {
    /// Sleep after bulk transfers to approximate the device's nominal rate.
    pub pacing: bool,
}

struct DeviceCell {
    model: Mutex<Box<dyn DeviceModel>>,
    gone: AtomicBool,
}

struct Attachment {
    cell: Arc<DeviceCell>,
    address: u8,
    descriptors: Option<DescriptorSet>,
    speed: Speed,
}

/// Snapshot of what is plugged into a port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortRecord {
    pub port: PortId,
    pub address: u8,
    pub enumerated: bool,
    pub speed: Speed,
}

/// Two root ports, no hubs.
pub struct UsbBus {
    ports: [Mutex<Option<Attachment>>; 2],
    last_address: Mutex<u8>,
    events: Mutex<Vec<BusEvent>>,
    journal: Mutex<Option<Vec<JournalEntry>>>,
    seq: AtomicU64,
    config: BusConfig,
}

impl Default for UsbBus {
    fn default() -> Self {
        Self::new(BusConfig::default())
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl UsbBus {
    pub fn new(config: BusConfig) -> Self {
        UsbBus {
            ports: [Mutex::new(None), Mutex::new(None)],
            last_address: Mutex::new(0),
            events: Mutex::new(Vec::new()),
            journal: Mutex::new(None),
            seq: AtomicU64::new(0),
            config,
        }
    }

    pub fn enable_journal(&self) {
        lock(&self.journal).get_or_insert_with(Vec::new);
    }

    pub fn journal(&self) -> Vec<JournalEntry> {
        lock(&self.journal).clone().unwrap_or_default()
    }

    pub fn events(&self) -> Vec<BusEvent> {
        lock(&self.events).clone()
    }

    pub fn event_log(&self) -> String {
        lock(&self.events)
            .iter()
            .map(|e| format!("{e}\n"))
            .collect()
    }

    fn emit(&self, port: PortId, kind: BusEventKind, address: u8) -> BusEvent {
        let ev = BusEvent {
            ts: Utc::now(),
            port,
            kind,
            address,
        };
        lock(&self.events).push(ev.clone());
        ev
    }

    pub fn attach(&self, port: PortId, model: Box<dyn DeviceModel>) -> Result<BusEvent, UsbError> {
        let mut slot = lock(&self.ports[port.index()]);
        if slot.is_some() {
            return Err(UsbError::PortOccupied(port));
        }
        let speed = model.speed();
        *slot = Some(Attachment {
            cell: Arc::new(DeviceCell {
                model: Mutex::new(model),
                gone: AtomicBool::new(false),
            }),
            address: 0,
            descriptors: None,
            speed,
        });
        Ok(self.emit(port, BusEventKind::Attach, 0))
    }

    /// Removes the device. A transfer already running on it completes with
    /// [`UsbError::DeviceGone`].
    pub fn detach(&self, port: PortId) -> Result<BusEvent, UsbError> {
        let att = lock(&self.ports[port.index()])
            .take()
            .ok_or(UsbError::PortEmpty(port))?;
        att.cell.gone.store(true, Ordering::SeqCst);
        let ev = self.emit(port, BusEventKind::Detach, att.address);
        let cell = att.cell;
        let done = match cell.model.try_lock() {
            Ok(mut m) => {
                m.on_detach();
                true
            }
            Err(_) => false,
        };
        if !done {
            // A transfer holds the device; finish the teardown once it lets go.
            std::thread::spawn(move || lock(&cell.model).on_detach());
        }
        Ok(ev)
    }

    pub fn port_record(&self, port: PortId) -> Option<PortRecord> {
        lock(&self.ports[port.index()]).as_ref().map(|a| PortRecord {
            port,
            address: a.address,
            enumerated: a.descriptors.is_some(),
            speed: a.speed,
        })
    }

    pub fn addresses_in_use(&self) -> Vec<u8> {
        PortId::ALL
            .iter()
            .filter_map(|p| self.port_record(*p))
            .filter(|r| r.enumerated)
            .map(|r| r.address)
            .collect()
    }

    /// Next address from a counter starting at 1. Once 127 is used the
    /// counter wraps, skipping any address still held by a device.
    fn allocate_address(&self) -> u8 {
        let in_use = self.addresses_in_use();
        let mut last = lock(&self.last_address);
        let mut next = *last;
        loop {
            next = if next >= 127 { 1 } else { next + 1 };
            if !in_use.contains(&next) {
                break;
            }
        }
        *last = next;
        next
    }

    fn cell_for_port(&self, port: PortId) -> Result<(Arc<DeviceCell>, u8, bool), UsbError> {
        let slot = lock(&self.ports[port.index()]);
        let a = slot.as_ref().ok_or(UsbError::PortEmpty(port))?;
        Ok((a.cell.clone(), a.address, a.descriptors.is_some()))
    }

    fn lookup(&self, address: u8) -> Result<(PortId, Arc<DeviceCell>, DescriptorSet), UsbError> {
        if address != 0 {
            for port in PortId::ALL {
                let slot = lock(&self.ports[port.index()]);
                if let Some(a) = slot.as_ref() {
                    if a.address == address {
                        if let Some(d) = &a.descriptors {
                            return Ok((port, a.cell.clone(), d.clone()));
                        }
                    }
                }
            }
        }
        Err(UsbError::NoSuchDevice(address))
    }

    /// Runs `f` with exclusive access to the device model. Fails with
    /// `DeviceGone` if the device was unplugged before or during the call.
    fn transact<R>(
        &self,
        port: PortId,
        cell: &DeviceCell,
        f: impl FnOnce(&mut dyn DeviceModel) -> R,
    ) -> Result<R, UsbError> {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        if let Some(j) = lock(&self.journal).as_mut() {
            j.push(JournalEntry::Begin { seq, port });
        }
        let result = {
            let mut model = lock(&cell.model);
            if cell.gone.load(Ordering::SeqCst) {
                Err(UsbError::DeviceGone)
            } else {
                let r = f(&mut **model);
                if cell.gone.load(Ordering::SeqCst) {
                    Err(UsbError::DeviceGone)
                } else {
                    Ok(r)
                }
            }
        };
        if let Some(j) = lock(&self.journal).as_mut() {
            j.push(JournalEntry::End {
                seq,
                port,
                ok: result.is_ok(),
            });
        }
        result
    }

    fn pace(&self, speed: Speed, bytes: usize) {
        if self.config.pacing && bytes > 0 {
            let nanos = bytes as u64 * 1_000_000_000 / speed.bytes_per_second();
            std::thread::sleep(Duration::from_nanos(nanos));
        }
    }

    fn control_on(
        &self,
        port: PortId,
        cell: &DeviceCell,
        setup: &SetupPacket,
        payload: &[u8],
    ) -> Result<Vec<u8>, UsbError> {
        let mut out = self
            .transact(port, cell, |m| m.control(setup, payload))?
            .map_err(|_| UsbError::RequestStalled)?;
        if setup.is_device_to_host() {
            out.truncate(setup.length as usize);
        } else {
            out.clear();
        }
        Ok(out)
    }

    /// Assigns an address, reads every descriptor and selects the first
    /// configuration.
    pub fn enumerate(&self, port: PortId) -> Result<EnumeratedDevice, UsbError> {
        let (cell, address, enumerated) = self.cell_for_port(port)?;
        if enumerated {
            return Err(UsbError::AlreadyEnumerated(address));
        }

        let dev_bytes = self.control_on(
            port,
            &cell,
            &SetupPacket::get_descriptor(DESC_DEVICE, 0, DEVICE_DESC_LEN as u16),
            &[],
        )?;
        let device = DeviceDescriptor::parse(&dev_bytes)?;

        let address = self.allocate_address();
        self.control_on(port, &cell, &SetupPacket::set_address(address), &[])?;

        let mut configurations = Vec::with_capacity(device.num_configurations as usize);
        for index in 0..device.num_configurations {
            let head = self.control_on(
                port,
                &cell,
                &SetupPacket::get_descriptor(DESC_CONFIGURATION, index, CONFIG_DESC_LEN as u16),
                &[],
            )?;
            if head.len() < 4 {
                return Err(DescriptorError::Malformed("short configuration header".into()).into());
            }
            let total = u16::from_le_bytes([head[2], head[3]]);
            let full = self.control_on(
                port,
                &cell,
                &SetupPacket::get_descriptor(DESC_CONFIGURATION, index, total),
                &[],
            )?;
            configurations.push(ConfigurationDescriptor::parse(&full)?);
        }
        let first = configurations
            .first()
            .ok_or_else(|| DescriptorError::Malformed("no configurations".into()))?
            .value;
        self.control_on(port, &cell, &SetupPacket::set_configuration(first), &[])?;

        let descriptors = DescriptorSet {
            device,
            configurations,
        };
        let speed = {
            let mut slot = lock(&self.ports[port.index()]);
            match slot.as_mut() {
                Some(a) if Arc::ptr_eq(&a.cell, &cell) => {
                    a.address = address;
                    a.descriptors = Some(descriptors.clone());
                    a.speed
                }
                _ => return Err(UsbError::DeviceGone),
            }
        };
        self.emit(port, BusEventKind::Enumerated, address);
        Ok(EnumeratedDevice {
            port,
            address,
            descriptors,
            speed,
        })
    }

    /// Re-reads the descriptors of an enumerated device without changing
    /// its state.
    pub fn read_descriptors(&self, address: u8) -> Result<(Vec<u8>, Vec<u8>), UsbError> {
        let dev = self.control_transfer(
            address,
            SetupPacket::get_descriptor(DESC_DEVICE, 0, DEVICE_DESC_LEN as u16),
            &[],
        )?;
        let head = self.control_transfer(
            address,
            SetupPacket::get_descriptor(DESC_CONFIGURATION, 0, CONFIG_DESC_LEN as u16),
            &[],
        )?;
        let total = u16::from_le_bytes([head[2], head[3]]);
        let cfg = self.control_transfer(
            address,
            SetupPacket::get_descriptor(DESC_CONFIGURATION, 0, total),
            &[],
        )?;
        Ok((dev, cfg))
    }

    pub fn control_transfer(
        &self,
        address: u8,
        setup: SetupPacket,
        payload: &[u8],
    ) -> Result<Vec<u8>, UsbError> {
        let (port, cell, _) = self.lookup(address)?;
        self.control_on(port, &cell, &setup, payload)
    }

    fn check_endpoint(
        descriptors: &DescriptorSet,
        endpoint: u8,
        dir: Direction,
    ) -> Result<(), UsbError> {
        match descriptors.endpoint(endpoint) {
            Some(ep) if ep.transfer_type == TransferType::Bulk && ep.direction() == dir => Ok(()),
            _ => Err(UsbError::NoSuchEndpoint(endpoint)),
        }
    }

    pub fn bulk_out(&self, address: u8, endpoint: u8, data: &[u8]) -> Result<usize, UsbError> {
        let (port, cell, desc) = self.lookup(address)?;
        Self::check_endpoint(&desc, endpoint, Direction::Out)?;
        let n = self
            .transact(port, &cell, |m| m.bulk_out(endpoint, data))?
            .map_err(|_| UsbError::EndpointHalted(endpoint))?;
        self.pace(self.port_record(port).map_or(Speed::Full, |r| r.speed), n);
        Ok(n)
    }

    pub fn bulk_in(&self, address: u8, endpoint: u8, max_len: usize) -> Result<Vec<u8>, UsbError> {
        let (port, cell, desc) = self.lookup(address)?;
        Self::check_endpoint(&desc, endpoint, Direction::In)?;
        let mut data = self
            .transact(port, &cell, |m| m.bulk_in(endpoint, max_len))?
            .map_err(|_| UsbError::EndpointHalted(endpoint))?;
        data.truncate(max_len);
        self.pace(
            self.port_record(port).map_or(Speed::Full, |r| r.speed),
            data.len(),
        );
        Ok(data)
    }
}
