//! The `usbbridge` command line. Every invocation re-plugs the drives named
//! in the port-state file, performs one operation, and exits.

use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDateTime;
use clap::{Parser, Subcommand, ValueEnum};
use usbbridge::blockdev::{BlockImage, SECTOR_SIZE};
use usbbridge::bridge::{Bridge, BridgeConfig, BridgeError, CopyRequest, EventPayload, PortState, PortStatus};
use usbbridge::fat::{self, Clock, FatError, FatVariant, FixedClock, MkfsOptions, SystemClock};
use usbbridge::usb::{BusConfig, PortId};

use crate::api;
use crate::state::PortFile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_FOUND: i32 = 3;
pub const EXIT_DEVICE: i32 = 4;
pub const EXIT_TRANSFER: i32 = 5;

const SETTLE: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(name = "usbbridge", version, about = "Emulated two-port USB flash-drive bridge")]
pub struct Cli {
    /// Port-state file recording which image is plugged into which port.
    #[arg(long, global = true, env = "USBBRIDGE_STATE", default_value = "usbbridge-state.json")]
    pub state: PathBuf,

    /// Use this local time for every FAT timestamp (YYYY-MM-DDTHH:MM:SS).
    #[arg(long, global = true, env = "USBBRIDGE_FIXED_TIME")]
    pub fixed_time: Option<NaiveDateTime>,

    /// Pace bulk transfers to the drive's nominal USB speed.
    #[arg(long, global = true)]
    pub pace: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Fat16,
    Fat32,
}

impl From<VariantArg> for FatVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Fat16 => FatVariant::Fat16,
            VariantArg::Fat32 => FatVariant::Fat32,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plug an image into a port and mount it.
    Attach {
        port: PortId,
        image: PathBuf,
        #[arg(long)]
        read_only: bool,
    },
    /// Unplug a port.
    Detach { port: PortId },
    /// Format an image, creating it first when --size is given.
    Mkfs {
        image: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Sectors per cluster.
        #[arg(long)]
        spc: Option<u8>,
        #[arg(long)]
        label: Option<String>,
        /// Size of a new image, e.g. 16M or 64MiB.
        #[arg(long, value_parser = parse_size)]
        size: Option<u64>,
    },
    /// List a directory on a mounted drive.
    Ls { port: PortId, path: String },
    /// Show volume information for a port.
    Info { port: PortId },
    /// Copy between ports: `cp A:/file B:/dir`.
    Cp {
        src: PortPath,
        dst: PortPath,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        recursive: bool,
    },
    /// Copy a local file onto a mounted drive.
    Put {
        local: PathBuf,
        dst: PortPath,
        #[arg(long)]
        overwrite: bool,
    },
    /// Copy a file from a mounted drive to the local filesystem.
    Get { src: PortPath, local: PathBuf },
    /// Check an image for filesystem damage without modifying it.
    Fsck { image: PathBuf },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long, default_value = api::DEFAULT_LISTEN)]
        listen: SocketAddr,
    },
}

/// `PORT:/path` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortPath {
    pub port: PortId,
    pub path: String,
}

impl std::str::FromStr for PortPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (port, path) = s
            .split_once(':')
            .ok_or_else(|| format!("expected PORT:/path, got {s:?}"))?;
        Ok(PortPath {
            port: port.parse()?,
            path: path.to_string(),
        })
    }
}

/// Accepts plain bytes or a K/M/G suffix (powers of 1024, optional `iB`).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t.strip_suffix("iB").or_else(|| t.strip_suffix('B')).unwrap_or(t);
    let (num, mult) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1u64 << 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 1 << 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    let n: u64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let bytes = n.checked_mul(mult).ok_or_else(|| format!("size {s:?} overflows"))?;
    if bytes % SECTOR_SIZE as u64 != 0 {
        return Err(format!("size {bytes} is not a multiple of {SECTOR_SIZE}"));
    }
    Ok(bytes)
}

#[derive(Debug)]
pub struct Failure {
    pub exit: i32,
    pub message: String,
}

impl Failure {
    fn new(exit: i32, message: impl Into<String>) -> Self {
        Failure {
            exit,
            message: message.into(),
        }
    }
}

fn device_failure(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_DEVICE, e.to_string())
}

/// Exit code for a bridge error outside a copy.
fn exit_for(e: &BridgeError) -> i32 {
    match e.code() {
        "not-found" | "unknown-job" => EXIT_NOT_FOUND,
        "bad-request" | "same-port" => EXIT_USAGE,
        _ => EXIT_DEVICE,
    }
}

impl From<BridgeError> for Failure {
    fn from(e: BridgeError) -> Self {
        Failure::new(exit_for(&e), e.to_string())
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn clock(&self) -> Arc<dyn Clock> {
        match self.cli.fixed_time {
            Some(t) => Arc::new(FixedClock(t)),
            None => Arc::new(SystemClock),
        }
    }

    fn bridge(&self) -> Bridge {
        Bridge::new(BridgeConfig {
            bus: BusConfig { pacing: self.cli.pace },
            clock: self.clock(),
            ..BridgeConfig::default()
        })
    }

    fn ports(&self) -> Result<PortFile, Failure> {
        PortFile::load(&self.cli.state)
            .map_err(|e| device_failure(format!("state file {}: {e}", self.cli.state.display())))
    }

    /// A bridge with every recorded drive plugged back in.
    fn restored(&self) -> Result<Bridge, Failure> {
        let b = self.bridge();
        match self.ports()?.restore(&b, SETTLE).into_iter().next() {
            Some((port, e)) => Err(device_failure(format!("port {port}: {e}"))),
            None => Ok(b),
        }
    }

    fn save(&self, b: &Bridge) -> Result<(), Failure> {
        PortFile::from_ports(&b.ports())
            .save(&self.cli.state)
            .map_err(|e| device_failure(format!("state file {}: {e}", self.cli.state.display())))
    }
}

pub fn port_line(p: &PortState) -> String {
    let image = p.image.as_deref().unwrap_or("-");
    match (&p.status, &p.volume) {
        (PortStatus::Ready, Some(v)) => format!(
            "{} ready {image} {} label={:?} total={} free={}{}",
            p.port,
            v.variant,
            v.label,
            v.total_bytes,
            v.free_bytes,
            if p.read_only { " read-only" } else { "" }
        ),
        (PortStatus::Failed, _) => format!("{} failed {image} {}", p.port, p.error.as_deref().unwrap_or("")),
        (status, _) => format!("{} {status} {image}", p.port),
    }
}

pub fn info_lines(p: &PortState) -> Vec<String> {
    let mut v = vec![format!("port: {}", p.port), format!("status: {}", p.status)];
    if let Some(img) = &p.image {
        v.push(format!("image: {img}"));
    }
    if let Some(vol) = &p.volume {
        v.push(format!("variant: {}", vol.variant));
        v.push(format!("label: {}", vol.label));
        v.push(format!("total_bytes: {}", vol.total_bytes));
        v.push(format!("free_bytes: {}", vol.free_bytes));
        v.push(format!("cluster_bytes: {}", vol.cluster_bytes));
    }
    v.push(format!("read_only: {}", p.read_only));
    if let Some(e) = &p.error {
        v.push(format!("error: {e}"));
    }
    v
}

fn ready_port(b: &Bridge, port: PortId) -> Result<PortState, Failure> {
    let s = b.port(port);
    match s.status {
        PortStatus::Ready => Ok(s),
        PortStatus::Failed => Err(device_failure(format!(
            "port-not-ready: port {port} failed: {}",
            s.error.unwrap_or_default()
        ))),
        other => Err(BridgeError::PortNotReady(port, other).into()),
    }
}

fn w(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), Failure> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Failure::new(1, e.to_string()))
}

fn execute(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    match &ctx.cli.command {
        Command::Attach { port, image, read_only } => {
            let b = ctx.restored()?;
            let image = std::path::absolute(image).unwrap_or_else(|_| image.clone());
            b.attach(*port, &image, *read_only)?;
            let s = b.wait_settled(*port, SETTLE);
            ctx.save(&b)?;
            w(ctx.out, port_line(&s))?;
            if s.status != PortStatus::Ready {
                return Err(device_failure(format!(
                    "{}: {}",
                    s.error_code.as_deref().unwrap_or("probe-timeout"),
                    s.error.as_deref().unwrap_or("drive did not become ready")
                )));
            }
            Ok(())
        }
        Command::Detach { port } => {
            let mut file = ctx.ports()?;
            if file.ports.remove(port).is_none() {
                return Err(BridgeError::PortEmpty(*port).into());
            }
            file.save(&ctx.cli.state).map_err(device_failure)?;
            w(ctx.out, format!("{port} empty"))
        }
        Command::Mkfs {
            image,
            variant,
            spc,
            label,
            size,
        } => {
            let dev = match size {
                Some(bytes) => BlockImage::create(image, bytes / SECTOR_SIZE as u64),
                None => BlockImage::open(image, false),
            }
            .map_err(|e| match e {
                usbbridge::blockdev::BlockError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
                    Failure::new(EXIT_NOT_FOUND, format!("not-found: {} (use --size to create)", image.display()))
                }
                other => device_failure(other),
            })?;
            let opts = MkfsOptions {
                sectors_per_cluster: *spc,
                label: label.clone(),
                volume_id: None,
            };
            let vol = fat::mkfs(dev, (*variant).into(), &opts, ctx.clock()).map_err(device_failure)?;
            let info = vol.volume_info();
            vol.into_inner().flush().map_err(device_failure)?;
            w(
                ctx.out,
                format!(
                    "{} {} label={:?} clusters={} cluster_bytes={} total={}",
                    image.display(),
                    info.variant,
                    info.label,
                    info.cluster_count,
                    info.cluster_bytes,
                    info.total_bytes
                ),
            )
        }
        Command::Ls { port, path } => {
            let b = ctx.restored()?;
            ready_port(&b, *port)?;
            let listing = b.browse(*port, path)?;
            for e in listing.entries {
                let when = e
                    .modified
                    .map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string())
                    .unwrap_or_else(|| "-".into());
                let kind = if e.is_dir { 'd' } else { '-' };
                w(ctx.out, format!("{kind} {:>10} {when} {}", e.size, e.name))?;
            }
            Ok(())
        }
        Command::Info { port } => {
            let b = ctx.restored()?;
            let s = b.port(*port);
            for l in info_lines(&s) {
                w(ctx.out, l)?;
            }
            ready_port(&b, *port).map(drop)
        }
        Command::Cp {
            src,
            dst,
            overwrite,
            recursive,
        } => {
            let b = ctx.restored()?;
            ready_port(&b, src.port)?;
            ready_port(&b, dst.port)?;
            let events = b.subscribe();
            let req = CopyRequest {
                src_port: src.port,
                src_path: src.path.clone(),
                dst_port: dst.port,
                dst_path: dst.path.clone(),
                overwrite: *overwrite,
                recursive: *recursive,
            };
            let job = b.start_copy(&req).map_err(|e| match exit_for(&e) {
                EXIT_DEVICE if e.code() != "port-not-ready" => Failure::new(EXIT_TRANSFER, e.to_string()),
                code => Failure::new(code, e.to_string()),
            })?;
            let done = loop {
                let ev = match events.recv_timeout(Duration::from_millis(200)) {
                    Ok(ev) => ev,
                    Err(_) => {
                        // Fall back to polling if the event feed went away.
                        let j = b.job(&job.id)?;
                        if j.state.is_terminal() {
                            break j;
                        }
                        continue;
                    }
                };
                match ev.payload {
                    EventPayload::JobProgress(j) if j.id == job.id => {
                        w(ctx.out, format!("{} {} {}/{}", j.id, j.state, j.copied_bytes, j.total_bytes))?;
                    }
                    EventPayload::JobFinished(j) if j.id == job.id => break j,
                    _ => {}
                }
            };
            let line = format!(
                "{} {} {}/{} {}:{}",
                done.id, done.state, done.copied_bytes, done.total_bytes, done.dst_port, done.dst_path
            );
            w(ctx.out, line)?;
            match done.error {
                None => Ok(()),
                Some(msg) => Err(Failure::new(EXIT_TRANSFER, msg)),
            }
        }
        Command::Put { local, dst, overwrite } => {
            let data = fs::read(local).map_err(|e| {
                let code = if e.kind() == io::ErrorKind::NotFound { EXIT_NOT_FOUND } else { EXIT_DEVICE };
                Failure::new(code, format!("{}: {e}", local.display()))
            })?;
            let b = ctx.restored()?;
            ready_port(&b, dst.port)?;
            let target = match b.with_volume(dst.port, |v| v.stat(&dst.path)) {
                Ok(e) if e.is_dir() => {
                    let name = local
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .ok_or_else(|| Failure::new(EXIT_USAGE, "local path has no file name"))?;
                    format!("{}/{name}", dst.path.trim_end_matches('/'))
                }
                _ => dst.path.clone(),
            };
            b.put_file(dst.port, &target, &data, *overwrite)?;
            w(ctx.out, format!("{}:{} {} bytes", dst.port, target, data.len()))
        }
        Command::Get { src, local } => {
            let b = ctx.restored()?;
            ready_port(&b, src.port)?;
            let data = b.read_file(src.port, &src.path)?;
            fs::write(local, &data).map_err(device_failure)?;
            w(ctx.out, format!("{} {} bytes", local.display(), data.len()))
        }
        Command::Fsck { image } => fsck_image(ctx.out, image),
        Command::Serve { listen } => serve(ctx, *listen),
    }
}

fn fsck_image(out: &mut dyn Write, image: &Path) -> Result<(), Failure> {
    let dev = BlockImage::open(image, true).map_err(|e| match e {
        usbbridge::blockdev::BlockError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
            Failure::new(EXIT_NOT_FOUND, format!("not-found: {}", image.display()))
        }
        other => device_failure(other),
    })?;
    let findings = fat::fsck(dev).map_err(|e: FatError| device_failure(format!("{}: {e}", e.code())))?;
    for f in &findings {
        w(out, f.to_string())?;
    }
    if findings.is_empty() {
        Ok(())
    } else {
        Err(device_failure(format!("{} findings", findings.len())))
    }
}

fn serve(ctx: &mut Ctx<'_>, listen: SocketAddr) -> Result<(), Failure> {
    let app = api::restore(ctx.bridge(), Some(&ctx.cli.state)).map_err(device_failure)?;
    let rt = tokio::runtime::Runtime::new().map_err(device_failure)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen).await.map_err(device_failure)?;
        let addr = listener.local_addr().map_err(device_failure)?;
        w(ctx.out, format!("listening on http://{addr}"))?;
        ctx.out.flush().ok();
        // Event streams never end on their own, so interrupting exits
        // directly rather than draining connections.
        tokio::select! {
            r = api::serve(listener, app, std::future::pending()) => r.map_err(device_failure),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

/// Runs one command, writing normal output to `out` and the failure
/// message to `err`. Returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut ctx = Ctx { cli, out };
    match execute(&mut ctx) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "usbbridge: {}", f.message);
            f.exit
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("16M"), Ok(16 << 20));
        assert_eq!(parse_size("64MiB"), Ok(64 << 20));
        assert_eq!(parse_size("1g"), Ok(1 << 30));
        assert_eq!(parse_size("4096"), Ok(4096));
        assert!(parse_size("1000").is_err());
        assert!(parse_size("12X").is_err());
    }

    #[test]
    fn port_paths() {
        assert_eq!(
            "b:/dir/x.bin".parse::<PortPath>(),
            Ok(PortPath {
                port: PortId::B,
                path: "/dir/x.bin".into()
            })
        );
        assert!("C:/x".parse::<PortPath>().is_err());
        assert!("/x".parse::<PortPath>().is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_for(&BridgeError::NotFound("/x".into())), EXIT_NOT_FOUND);
        assert_eq!(exit_for(&BridgeError::SamePort(PortId::A)), EXIT_USAGE);
        assert_eq!(exit_for(&BridgeError::PortEmpty(PortId::A)), EXIT_DEVICE);
    }
}
