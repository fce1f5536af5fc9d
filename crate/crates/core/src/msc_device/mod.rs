//! Emulated USB flash drive: one mass-storage interface (class 0x08,
//! subclass 0x06 SCSI transparent, protocol 0x50 Bulk-Only) with a bulk IN
//! and a bulk OUT endpoint, backed by a [`BlockImage`].
//!
//! The device is a state machine driven entirely by bus callbacks. A
//! [`DriveController`] shares its state so tests can inject faults or pull
//! the medium after the device has been plugged in.

pub mod bot;
pub mod scsi;

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::blockdev::BlockImage;
use crate::usb::descriptor::{
    request, string_descriptor, ConfigurationDescriptor, DeviceDescriptor, EndpointDescriptor,
    InterfaceDescriptor, SetupPacket, CLASS_MASS_STORAGE, DESC_CONFIGURATION, DESC_DEVICE,
    DESC_STRING, PROTOCOL_BULK_ONLY, SUBCLASS_SCSI,
};
use crate::usb::{DeviceModel, Speed, Stall};

pub use bot::{CommandBlockWrapper, CommandStatusWrapper, CswStatus, CBW_LEN, CSW_LEN};
pub use scsi::{DataPhase, InquiryIdentity, Readiness, ScsiDisk, SenseKey, SenseState};

pub const BULK_IN_EP: u8 = 0x81;
pub const BULK_OUT_EP: u8 = 0x02;
pub const INTERFACE_NUMBER: u8 = 0;
/// Oldest trace lines are dropped beyond this.
pub const TRACE_CAP: usize = 8192;

#[derive(Debug, Clone)]
pub struct DriveConfig {
    pub vendor_id: u16,
    pub product_id: u16,
    pub manufacturer: String,
    pub product: String,
    pub serial: String,
    pub identity: InquiryIdentity,
    pub subclass: u8,
    pub protocol: u8,
    pub speed: Speed,
    /// Report UNIT ATTENTION (power on / reset) on the first media command.
    pub unit_attention: bool,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            vendor_id: 0x1209,
            product_id: 0x0B0D,
            manufacturer: "USB Bridge".into(),
            product: "Virtual Flash Drive".into(),
            serial: "0000000001".into(),
            identity: InquiryIdentity::default(),
            subclass: SUBCLASS_SCSI,
            protocol: PROTOCOL_BULK_ONLY,
            speed: Speed::Full,
            unit_attention: true,
        }
    }
}

/// Injected misbehaviour, consumed by the next matching event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceFault {
    /// Answer the next command with CSW status 2 without executing it.
    PhaseError,
    /// Stall bulk IN when the next data or status stage is read.
    StallBulkIn,
}

/// One line of the device command trace: `tag opcode lba count status residue`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceTrace {
    pub tag: u32,
    pub opcode: u8,
    pub lba: u32,
    pub count: u16,
    pub status: CswStatus,
    pub residue: u32,
}

impl fmt::Display for DeviceTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:#04x} {} {} {} {}",
            self.tag, self.opcode, self.lba, self.count, self.status, self.residue
        )
    }
}

#[derive(Debug)]
enum BotState {
    Idle,
    DataIn { data: Vec<u8>, csw: CommandStatusWrapper },
    DataOut { cbw: CommandBlockWrapper, received: Vec<u8>, phase_error: bool },
    Status(CommandStatusWrapper),
}

#[derive(Debug)]
struct DriveState {
    disk: ScsiDisk,
    bot: BotState,
    halted_in: bool,
    halted_out: bool,
    /// Invalid CBW seen; only a mass storage reset clears this.
    needs_reset: bool,
    address: u8,
    configuration: u8,
    faults: Vec<DeviceFault>,
    trace: VecDeque<DeviceTrace>,
    resets: u32,
    csw_sent: u32,
}

/// Shared handle for inspecting and poking a plugged-in drive.
#[derive(Clone)]
pub struct DriveController {
    state: Arc<Mutex<DriveState>>,
}

fn lock(m: &Mutex<DriveState>) -> MutexGuard<'_, DriveState> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl DriveController {
    pub fn inject(&self, fault: DeviceFault) {
        lock(&self.state).faults.push(fault);
    }

    pub fn set_readiness(&self, r: Readiness) {
        lock(&self.state).disk.set_readiness(r);
    }

    /// Removes the medium while the device stays on the bus.
    pub fn eject_medium(&self) -> Option<BlockImage> {
        lock(&self.state).disk.eject()
    }

    pub fn trace(&self) -> Vec<DeviceTrace> {
        lock(&self.state).trace.iter().cloned().collect()
    }

    pub fn halted(&self) -> (bool, bool) {
        let s = lock(&self.state);
        (s.halted_in, s.halted_out)
    }

    pub fn needs_reset(&self) -> bool {
        lock(&self.state).needs_reset
    }

    pub fn resets(&self) -> u32 {
        lock(&self.state).resets
    }

    pub fn sense(&self) -> SenseState {
        lock(&self.state).disk.sense()
    }

    pub fn address(&self) -> u8 {
        lock(&self.state).address
    }

    /// Runs `f` against the backing image, bypassing USB and SCSI.
    pub fn with_medium<R>(&self, f: impl FnOnce(&mut BlockImage) -> R) -> Option<R> {
        lock(&self.state).disk.medium_mut().map(f)
    }
}

pub struct MassStorageDevice {
    config: DriveConfig,
    state: Arc<Mutex<DriveState>>,
}

impl MassStorageDevice {
    pub fn new(image: BlockImage, config: DriveConfig) -> Self {
        let disk = ScsiDisk::new(image, config.identity.clone(), config.unit_attention);
        MassStorageDevice {
            config,
            state: Arc::new(Mutex::new(DriveState {
                disk,
                bot: BotState::Idle,
                halted_in: false,
                halted_out: false,
                needs_reset: false,
                address: 0,
                configuration: 0,
                faults: Vec::new(),
                trace: VecDeque::new(),
                resets: 0,
                csw_sent: 0,
            })),
        }
    }

    pub fn controller(&self) -> DriveController {
        DriveController {
            state: self.state.clone(),
        }
    }

    pub fn device_descriptor(&self) -> DeviceDescriptor {
        DeviceDescriptor {
            usb_version: 0x0200,
            class: 0,
            subclass: 0,
            protocol: 0,
            max_packet_size0: 64,
            vendor_id: self.config.vendor_id,
            product_id: self.config.product_id,
            device_version: 0x0100,
            manufacturer_index: 1,
            product_index: 2,
            serial_index: 3,
            num_configurations: 1,
        }
    }

    pub fn configuration_descriptor(&self) -> ConfigurationDescriptor {
        let mps = match self.config.speed {
            Speed::Full => 64,
            Speed::High => 512,
        };
        ConfigurationDescriptor {
            value: 1,
            string_index: 0,
            attributes: 0x80,
            max_power: 50,
            interfaces: vec![InterfaceDescriptor {
                number: INTERFACE_NUMBER,
                alternate_setting: 0,
                class: CLASS_MASS_STORAGE,
                subclass: self.config.subclass,
                protocol: self.config.protocol,
                string_index: 0,
                endpoints: vec![
                    EndpointDescriptor::bulk(BULK_IN_EP, mps),
                    EndpointDescriptor::bulk(BULK_OUT_EP, mps),
                ],
            }],
        }
    }

    fn string(&self, index: u8) -> Option<Vec<u8>> {
        match index {
            // LANGID table: en-US.
            0 => Some(vec![4, DESC_STRING, 0x09, 0x04]),
            1 => Some(string_descriptor(&self.config.manufacturer)),
            2 => Some(string_descriptor(&self.config.product)),
            3 => Some(string_descriptor(&self.config.serial)),
            _ => None,
        }
    }
}

impl DriveState {
    fn take_fault(&mut self, f: DeviceFault) -> bool {
        if let Some(i) = self.faults.iter().position(|x| *x == f) {
            self.faults.remove(i);
            true
        } else {
            false
        }
    }

    fn invalid_cbw(&mut self) {
        self.needs_reset = true;
        self.halted_in = true;
        self.halted_out = true;
        self.bot = BotState::Idle;
    }

    fn record(&mut self, cbw: &CommandBlockWrapper, csw: &CommandStatusWrapper) {
        let cdb = cbw.cdb();
        let (lba, count) = scsi::rw10_fields(cdb)
            .filter(|_| cdb[0] == scsi::opcode::READ_10 || cdb[0] == scsi::opcode::WRITE_10)
            .unwrap_or((0, 0));
        if self.trace.len() == TRACE_CAP {
            self.trace.pop_front();
        }
        self.trace.push_back(DeviceTrace {
            tag: cbw.tag,
            opcode: cdb[0],
            lba,
            count,
            status: csw.status,
            residue: csw.data_residue,
        });
    }

    fn finish(&mut self, cbw: &CommandBlockWrapper, status: CswStatus, transferred: usize) -> CommandStatusWrapper {
        let csw = CommandStatusWrapper {
            tag: cbw.tag,
            data_residue: cbw.data_transfer_length - transferred as u32,
            status,
        };
        self.record(cbw, &csw);
        csw
    }

    fn accept_cbw(&mut self, bytes: &[u8]) {
        let cbw = match CommandBlockWrapper::parse(bytes) {
            Ok(c) if c.lun == 0 => c,
            _ => return self.invalid_cbw(),
        };
        let host_len = cbw.data_transfer_length as usize;
        let phase_error = self.take_fault(DeviceFault::PhaseError);
        let expected = self.disk.data_phase(cbw.cdb());

        let mismatch = match expected {
            DataPhase::None => false,
            DataPhase::In(n) => n > 0 && (!cbw.is_data_in() || n > host_len),
            DataPhase::Out(n) => n > 0 && (cbw.is_data_in() || n > host_len),
        };

        if !cbw.is_data_in() && host_len > 0 {
            // Host will send data whatever happens; collect it first.
            self.bot = BotState::DataOut {
                cbw,
                received: Vec::with_capacity(host_len),
                phase_error: phase_error || mismatch,
            };
            return;
        }

        if phase_error || mismatch {
            let csw = self.finish(&cbw, CswStatus::PhaseError, 0);
            self.bot = if host_len > 0 {
                BotState::DataIn { data: Vec::new(), csw }
            } else {
                BotState::Status(csw)
            };
            return;
        }

        let mut out = self.disk.execute(cbw.cdb(), &[]);
        out.data.truncate(host_len);
        let status = if out.good { CswStatus::Passed } else { CswStatus::Failed };
        let csw = self.finish(&cbw, status, out.data.len());
        self.bot = if host_len > 0 {
            BotState::DataIn { data: out.data, csw }
        } else {
            BotState::Status(csw)
        };
    }

    fn accept_data_out(&mut self, data: &[u8]) -> usize {
        let BotState::DataOut { cbw, received, phase_error } = &mut self.bot else {
            unreachable!()
        };
        let want = cbw.data_transfer_length as usize - received.len();
        let take = data.len().min(want);
        received.extend_from_slice(&data[..take]);
        if received.len() < cbw.data_transfer_length as usize {
            return take;
        }
        let cbw = *cbw;
        let phase_error = *phase_error;
        let received = std::mem::take(received);
        let csw = if phase_error {
            self.finish(&cbw, CswStatus::PhaseError, 0)
        } else {
            let out = self.disk.execute(cbw.cdb(), &received);
            let used = match self.disk.data_phase(cbw.cdb()) {
                DataPhase::Out(n) if out.good => n,
                _ => 0,
            };
            let status = if out.good { CswStatus::Passed } else { CswStatus::Failed };
            self.finish(&cbw, status, used)
        };
        self.bot = BotState::Status(csw);
        take
    }
}

impl DeviceModel for MassStorageDevice {
    fn speed(&self) -> Speed {
        self.config.speed
    }

    fn control(&mut self, setup: &SetupPacket, _data: &[u8]) -> Result<Vec<u8>, Stall> {
        use request::*;
        let mut st = lock(&self.state);
        match (setup.request_type, setup.request) {
            (TYPE_STANDARD_DEVICE_IN, GET_DESCRIPTOR) => {
                let kind = (setup.value >> 8) as u8;
                let index = setup.value as u8;
                match kind {
                    DESC_DEVICE => Ok(self.device_descriptor().to_bytes().to_vec()),
                    DESC_CONFIGURATION if index == 0 => {
                        Ok(self.configuration_descriptor().to_bytes())
                    }
                    DESC_STRING => self.string(index).ok_or(Stall),
                    _ => Err(Stall),
                }
            }
            (TYPE_STANDARD_DEVICE_OUT, SET_ADDRESS) => {
                st.address = setup.value as u8 & 0x7F;
                Ok(Vec::new())
            }
            (TYPE_STANDARD_DEVICE_OUT, SET_CONFIGURATION) => match setup.value {
                0 | 1 => {
                    st.configuration = setup.value as u8;
                    Ok(Vec::new())
                }
                _ => Err(Stall),
            },
            (TYPE_STANDARD_DEVICE_IN, GET_CONFIGURATION) => Ok(vec![st.configuration]),
            (TYPE_STANDARD_DEVICE_IN, GET_STATUS) => Ok(vec![0, 0]),
            (TYPE_STANDARD_ENDPOINT_IN, GET_STATUS) => {
                let halted = match setup.index as u8 {
                    BULK_IN_EP => st.halted_in,
                    BULK_OUT_EP => st.halted_out,
                    0 | 0x80 => false,
                    _ => return Err(Stall),
                };
                Ok(vec![halted as u8, 0])
            }
            (TYPE_STANDARD_ENDPOINT_OUT, CLEAR_FEATURE)
                if setup.value == FEATURE_ENDPOINT_HALT =>
            {
                // Clearing has no effect until a reset follows an invalid CBW.
                match setup.index as u8 {
                    BULK_IN_EP if !st.needs_reset => st.halted_in = false,
                    BULK_OUT_EP if !st.needs_reset => st.halted_out = false,
                    BULK_IN_EP | BULK_OUT_EP | 0 | 0x80 => {}
                    _ => return Err(Stall),
                }
                Ok(Vec::new())
            }
            (TYPE_CLASS_INTERFACE_OUT, BOMS_RESET)
                if setup.index == INTERFACE_NUMBER as u16 && setup.length == 0 =>
            {
                st.needs_reset = false;
                st.bot = BotState::Idle;
                st.resets += 1;
                Ok(Vec::new())
            }
            (TYPE_CLASS_INTERFACE_IN, GET_MAX_LUN) if setup.index == INTERFACE_NUMBER as u16 => {
                Ok(vec![0])
            }
            _ => Err(Stall),
        }
    }

    fn bulk_out(&mut self, endpoint: u8, data: &[u8]) -> Result<usize, Stall> {
        let mut st = lock(&self.state);
        if endpoint != BULK_OUT_EP || st.halted_out {
            return Err(Stall);
        }
        match st.bot {
            BotState::Idle => {
                st.accept_cbw(data);
                Ok(data.len())
            }
            BotState::DataOut { .. } => Ok(st.accept_data_out(data)),
            // Out of sequence: treat as an invalid CBW.
            BotState::DataIn { .. } | BotState::Status(_) => {
                st.invalid_cbw();
                Ok(data.len())
            }
        }
    }

    fn bulk_in(&mut self, endpoint: u8, max_len: usize) -> Result<Vec<u8>, Stall> {
        let mut st = lock(&self.state);
        if endpoint != BULK_IN_EP || st.halted_in {
            return Err(Stall);
        }
        if matches!(st.bot, BotState::DataIn { .. } | BotState::Status(_))
            && st.take_fault(DeviceFault::StallBulkIn)
        {
            st.halted_in = true;
            return Err(Stall);
        }
        match std::mem::replace(&mut st.bot, BotState::Idle) {
            BotState::DataIn { mut data, csw } => {
                let n = data.len().min(max_len);
                let chunk: Vec<u8> = data.drain(..n).collect();
                st.bot = if data.is_empty() {
                    BotState::Status(csw)
                } else {
                    BotState::DataIn { data, csw }
                };
                Ok(chunk)
            }
            BotState::Status(csw) => {
                st.csw_sent += 1;
                Ok(csw.to_bytes().to_vec())
            }
            other => {
                st.bot = other;
                Err(Stall)
            }
        }
    }

    fn on_detach(&mut self) {
        let mut st = lock(&self.state);
        if let Some(m) = st.disk.medium_mut() {
            m.discard_unflushed();
        }
    }
}
