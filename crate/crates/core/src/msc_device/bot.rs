//! Bulk-Only Transport framing: the 31-byte Command Block Wrapper and the
//! 13-byte Command Status Wrapper.

use std::fmt;

use thiserror::Error;

/// "USBC" in byte order.
pub const CBW_SIGNATURE: u32 = 0x4342_5355;
/// "USBS" in byte order.
pub const CSW_SIGNATURE: u32 = 0x5342_5355;
pub const CBW_LEN: usize = 31;
pub const CSW_LEN: usize = 13;
pub const FLAG_DATA_IN: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CbwError {
    #[error("CBW length {0}, expected 31")]
    Length(usize),
    #[error("bad CBW signature {0:#010x}")]
    Signature(u32),
    #[error("CBW command block length {0} outside 1..=16")]
    CommandLength(u8),
    #[error("reserved CBW bits set")]
    Reserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandBlockWrapper {
    pub tag: u32,
    pub data_transfer_length: u32,
    pub flags: u8,
    pub lun: u8,
    pub cb_length: u8,
    pub command_block: [u8; 16],
}

impl CommandBlockWrapper {
    pub fn new(tag: u32, data_transfer_length: u32, data_in: bool, cdb: &[u8]) -> Self {
        assert!((1..=16).contains(&cdb.len()), "CDB must be 1..=16 bytes");
        let mut command_block = [0u8; 16];
        command_block[..cdb.len()].copy_from_slice(cdb);
        CommandBlockWrapper {
            tag,
            data_transfer_length,
            flags: if data_in { FLAG_DATA_IN } else { 0 },
            lun: 0,
            cb_length: cdb.len() as u8,
            command_block,
        }
    }

    pub fn is_data_in(&self) -> bool {
        self.flags & FLAG_DATA_IN != 0
    }

    pub fn cdb(&self) -> &[u8] {
        &self.command_block[..self.cb_length as usize]
    }

    pub fn to_bytes(&self) -> [u8; CBW_LEN] {
        let mut b = [0u8; CBW_LEN];
        b[0..4].copy_from_slice(&CBW_SIGNATURE.to_le_bytes());
        b[4..8].copy_from_slice(&self.tag.to_le_bytes());
        b[8..12].copy_from_slice(&self.data_transfer_length.to_le_bytes());
        b[12] = self.flags;
        b[13] = self.lun;
        b[14] = self.cb_length;
        b[15..31].copy_from_slice(&self.command_block);
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, CbwError> {
        if b.len() != CBW_LEN {
            return Err(CbwError::Length(b.len()));
        }
        let sig = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if sig != CBW_SIGNATURE {
            return Err(CbwError::Signature(sig));
        }
        if b[12] & !FLAG_DATA_IN != 0 || b[13] & 0xF0 != 0 || b[14] & 0xE0 != 0 {
            return Err(CbwError::Reserved);
        }
        let cb_length = b[14];
        if !(1..=16).contains(&cb_length) {
            return Err(CbwError::CommandLength(cb_length));
        }
        let mut command_block = [0u8; 16];
        command_block.copy_from_slice(&b[15..31]);
        Ok(CommandBlockWrapper {
            tag: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
            data_transfer_length: u32::from_le_bytes([b[8], b[9], b[10], b[11]]),
            flags: b[12],
            lun: b[13],
            cb_length,
            command_block,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CswStatus {
    Passed,
    Failed,
    PhaseError,
}

impl CswStatus {
    pub fn code(self) -> u8 {
        match self {
            CswStatus::Passed => 0,
            CswStatus::Failed => 1,
            CswStatus::PhaseError => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CswStatus::Passed),
            1 => Some(CswStatus::Failed),
            2 => Some(CswStatus::PhaseError),
            _ => None,
        }
    }
}

impl fmt::Display for CswStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CswError {
    #[error("CSW length {0}, expected 13")]
    Length(usize),
    #[error("bad CSW signature {0:#010x}")]
    Signature(u32),
    #[error("CSW status {0} undefined")]
    Status(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandStatusWrapper {
    pub tag: u32,
    pub data_residue: u32,
    pub status: CswStatus,
}

impl CommandStatusWrapper {
    pub fn to_bytes(&self) -> [u8; CSW_LEN] {
        let mut b = [0u8; CSW_LEN];
        b[0..4].copy_from_slice(&CSW_SIGNATURE.to_le_bytes());
        b[4..8].copy_from_slice(&self.tag.to_le_bytes());
        b[8..12].copy_from_slice(&self.data_residue.to_le_bytes());
        b[12] = self.status.code();
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, CswError> {
        if b.len() != CSW_LEN {
            return Err(CswError::Length(b.len()));
        }
        let sig = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if sig != CSW_SIGNATURE {
            return Err(CswError::Signature(sig));
        }
        Ok(CommandStatusWrapper {
            tag: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
            data_residue: u32::from_le_bytes([b[8], b[9], b[10], b[11]]),
            status: CswStatus::from_code(b[12]).ok_or(CswError::Status(b[12]))?,
        })
    }
}
