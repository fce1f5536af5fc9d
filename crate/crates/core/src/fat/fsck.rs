//! Read-only consistency check. Each finding renders as one line:
//! `severity code path detail`.

use std::collections::HashMap;
use std::fmt;

use super::dir;
use super::{DirLoc, FatError, FatVariant, FatVolume, FsInfo};
use crate::blockdev::{BlockDevice, SECTOR_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub severity: Severity,
    pub code: &'static str,
    pub path: String,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.severity, self.code, self.path, self.detail)
    }
}

/// Mounts `dev` and checks it.
pub fn fsck<D: BlockDevice>(dev: D) -> Result<Vec<Finding>, FatError> {
    FatVolume::mount(dev)?.check()
}

struct Walker<'a, D: BlockDevice> {
    vol: &'a mut FatVolume<D>,
    owner: Vec<u32>,
    paths: Vec<String>,
    out: Vec<Finding>,
}

impl<D: BlockDevice> Walker<'_, D> {
    fn report(&mut self, severity: Severity, code: &'static str, path: &str, detail: String) {
        self.out.push(Finding {
            severity,
            code,
            path: path.to_string(),
            detail,
        });
    }

    /// Marks the chain from `start` as owned by `path`. Returns the chain
    /// if it is clean enough to follow.
    fn claim(&mut self, start: u32, path: &str) -> Option<Vec<u32>> {
        let id = self.paths.len() as u32 + 1;
        self.paths.push(path.to_string());
        let max = self.vol.geo.max_cluster();
        let mut chain = Vec::new();
        let mut c = start;
        loop {
            if !(2..=max).contains(&c) {
                self.report(
                    Severity::Error,
                    "bad-chain",
                    path,
                    format!("link to cluster {c:#x} outside 2..={max}"),
                );
                return None;
            }
            let o = self.owner[c as usize];
            if o == id {
                self.report(Severity::Error, "chain-loop", path, format!("cluster {c} revisited"));
                return None;
            }
            if o != 0 {
                let other = self.paths[o as usize - 1].clone();
                self.report(
                    Severity::Error,
                    "cross-link",
                    path,
                    format!("cluster {c} also belongs to {other}"),
                );
                return None;
            }
            self.owner[c as usize] = id;
            chain.push(c);
            let v = self.vol.fat_entry(c);
            if v == 0 {
                self.report(
                    Severity::Error,
                    "bad-chain",
                    path,
                    format!("cluster {c} is marked free inside a chain"),
                );
                return None;
            }
            if self.vol.geo.variant.is_eoc(v) {
                return Some(chain);
            }
            c = v;
        }
    }

    fn walk(&mut self, loc: DirLoc, path: &str, parent: u32) -> Result<(), FatError> {
        let buf = match self.vol.load_dir(loc) {
            Ok(b) => b,
            Err(FatError::Corrupt(d)) => {
                self.report(Severity::Error, "bad-directory", path, d);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let scan = dir::scan(&buf.data);
        if scan.orphan_lfn > 0 {
            self.report(
                Severity::Warning,
                "orphan-lfn",
                path,
                format!("{} long-name slots without a matching short entry", scan.orphan_lfn),
            );
        }
        if let DirLoc::Chain(me) = loc {
            if path != "/" {
                let dots: Vec<_> = scan.entries.iter().take(2).map(|l| (l.raw.name, l.raw.first_cluster)).collect();
                let want = [(*b".          ", me), (*b"..         ", parent)];
                if dots.as_slice() != want {
                    self.report(
                        Severity::Error,
                        "bad-dot-entry",
                        path,
                        format!("expected . -> {me} and .. -> {parent}"),
                    );
                }
            }
        }
        let cb = self.vol.geo.cluster_bytes as u64;
        let mut seen: HashMap<String, String> = HashMap::new();
        let me = match loc {
            DirLoc::Chain(c) if path != "/" => c,
            _ => 0,
        };
        for l in scan.entries {
            if l.raw.attr.is_volume_label() || l.raw.is_dot() {
                continue;
            }
            let e = l.entry;
            let child = if path == "/" {
                format!("/{}", e.name)
            } else {
                format!("{path}/{}", e.name)
            };
            for key in [Some(e.name.to_lowercase()), Some(e.short_display().to_lowercase())]
                .into_iter()
                .flatten()
                .collect::<std::collections::BTreeSet<_>>()
            {
                if let Some(prev) = seen.insert(key.clone(), child.clone()) {
                    self.report(
                        Severity::Error,
                        "duplicate-name",
                        &child,
                        format!("{key:?} also names {prev}"),
                    );
                }
            }
            if e.is_dir() {
                if e.first_cluster == 0 {
                    self.report(Severity::Error, "bad-directory", &child, "no first cluster".into());
                    continue;
                }
                if self.claim(e.first_cluster, &child).is_some() {
                    self.walk(DirLoc::Chain(e.first_cluster), &child, me)?;
                }
            } else if e.first_cluster == 0 {
                if e.size != 0 {
                    self.report(
                        Severity::Error,
                        "size-mismatch",
                        &child,
                        format!("{} bytes but no clusters", e.size),
                    );
                }
            } else if let Some(chain) = self.claim(e.first_cluster, &child) {
                let need = (e.size as u64).div_ceil(cb);
                if chain.len() as u64 != need {
                    self.report(
                        Severity::Error,
                        "size-mismatch",
                        &child,
                        format!("{} bytes need {need} clusters, chain has {}", e.size, chain.len()),
                    );
                }
            }
        }
        Ok(())
    }
}

pub(super) fn check<D: BlockDevice>(vol: &mut FatVolume<D>) -> Result<Vec<Finding>, FatError> {
    let mut out = Vec::new();
    compare_fat_copies(vol, &mut out)?;

    let max = vol.geo.max_cluster();
    let mut w = Walker {
        owner: vec![0; max as usize + 1],
        paths: Vec::new(),
        out: Vec::new(),
        vol,
    };
    let root = w.vol.root_loc();
    let walk_root = match root {
        DirLoc::Chain(c) => w.claim(c, "/").is_some(),
        DirLoc::FixedRoot => true,
    };
    if walk_root {
        w.walk(root, "/", 0)?;
    }

    let bad = w.vol.geo.variant.bad();
    let lost: Vec<u32> = (2..=max)
        .filter(|&c| {
            let v = w.vol.fat_entry(c);
            v != 0 && v != bad && w.owner[c as usize] == 0
        })
        .collect();
    if let Some(&first) = lost.first() {
        w.report(
            Severity::Error,
            "lost-clusters",
            "-",
            format!("{} allocated clusters belong to no file, first {first}", lost.len()),
        );
    }
    let scanned = w.vol.scan_free();
    if let Some(fi) = w.vol.fsinfo {
        if fi.free_count != FsInfo::UNKNOWN && fi.free_count != scanned {
            w.report(
                Severity::Warning,
                "fsinfo-free-count",
                "-",
                format!("FSInfo says {} free, FAT scan finds {scanned}", fi.free_count),
            );
        }
    }
    out.append(&mut w.out);
    Ok(out)
}

fn compare_fat_copies<D: BlockDevice>(
    vol: &mut FatVolume<D>,
    out: &mut Vec<Finding>,
) -> Result<(), FatError> {
    let fatsz = vol.bpb.sectors_per_fat as u64;
    let mut memory = Vec::with_capacity(fatsz as usize * SECTOR_SIZE);
    for &v in &vol.fat {
        match vol.geo.variant {
            FatVariant::Fat16 => memory.extend_from_slice(&(v as u16).to_le_bytes()),
            FatVariant::Fat32 => memory.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let mut buf = vec![0u8; 128 * SECTOR_SIZE];
    for k in 0..vol.bpb.num_fats as u64 {
        let base = vol.geo.first_fat_sector + k * fatsz;
        let mut differing = 0u64;
        let mut first = None;
        let mut s = 0u64;
        while s < fatsz {
            let n = (fatsz - s).min(128);
            let chunk = &mut buf[..n as usize * SECTOR_SIZE];
            vol.dev.read_blocks(base + s, chunk)?;
            let expect = &memory[s as usize * SECTOR_SIZE..(s + n) as usize * SECTOR_SIZE];
            for i in 0..n as usize {
                let range = i * SECTOR_SIZE..(i + 1) * SECTOR_SIZE;
                if chunk[range.clone()] != expect[range] {
                    differing += 1;
                    first.get_or_insert(s + i as u64);
                }
            }
            s += n;
        }
        if let Some(f) = first {
            out.push(Finding {
                severity: Severity::Error,
                code: if k == 0 { "fat-unsynced" } else { "fat-copy-mismatch" },
                path: "-".into(),
                detail: format!("FAT copy {k}: {differing} sectors differ, first at FAT sector {f}"),
            });
        }
    }
    Ok(())
}
