//! Which image sits in which port, kept on disk so separate CLI invocations
//! and service restarts see the same drives.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use usbbridge::bridge::{Bridge, PortState, PortStatus};
use usbbridge::usb::PortId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attached {
    pub image: PathBuf,
    pub read_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortFile {
    pub ports: BTreeMap<PortId, Attached>,
}

impl PortFile {
    /// A missing file means nothing is attached.
    pub fn load(path: &Path) -> io::Result<Self> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(PortFile::default()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)
    }

    pub fn from_ports(ports: &[PortState]) -> Self {
        let ports = ports
            .iter()
            .filter(|p| p.status != PortStatus::Empty)
            .filter_map(|p| {
                let image = PathBuf::from(p.image.as_ref()?);
                Some((
                    p.port,
                    Attached {
                        image,
                        read_only: p.read_only,
                    },
                ))
            })
            .collect();
        PortFile { ports }
    }

    /// Re-plugs every recorded drive, one port at a time, and waits for each
    /// to settle. Returns the drives that could not be plugged in.
    pub fn restore(&self, bridge: &Bridge, timeout: Duration) -> Vec<(PortId, String)> {
        let mut failed = Vec::new();
        for (&port, a) in &self.ports {
            match bridge.attach(port, &a.image, a.read_only) {
                Ok(_) => {
                    bridge.wait_settled(port, timeout);
                }
                Err(e) => failed.push((port, e.to_string())),
            }
        }
        failed
    }
}
