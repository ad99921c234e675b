//! Volume files: a text header `<stem>.hdr` next to a raw little-endian
//! payload `<stem>.raw`.
//!
//! ```text
//! nlunet-volume 1
//! dims 64 64 64
//! channels 2
//! dtype f32
//! order DHWC
//! norm_mean 0.41 0.52
//! norm_std 0.28 0.31
//! ```
//!
//! Label volumes use `dtype u8` and `channels 1`. The `norm_*` lines are
//! present only for normalized intensity volumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{voxel_count, ChannelStats, LabelVolume, Volume};
use crate::error::{Error, Result};

const MAGIC: &str = "nlunet-volume 1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("hdr"), with("raw"))
}

fn join<V: ToString>(v: impl IntoIterator<Item = V>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_pair(stem: &Path, header: String, payload: Vec<u8>) -> Result<()> {
    let (hdr, raw) = paths(stem);
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))
}

pub fn write_volume(stem: &Path, vol: &Volume) -> Result<()> {
    let mut header = format!(
        "{MAGIC}\ndims {}\nchannels {}\ndtype f32\norder DHWC\n",
        join(vol.dims),
        vol.channels
    );
    if let Some(stats) = &vol.stats {
        header.push_str(&format!("norm_mean {}\n", join(stats.iter().map(|s| s.mean))));
        header.push_str(&format!("norm_std {}\n", join(stats.iter().map(|s| s.std))));
    }
    let payload = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(stem, header, payload)
}

pub fn write_labels(stem: &Path, labels: &LabelVolume) -> Result<()> {
    let header = format!("{MAGIC}\ndims {}\nchannels 1\ndtype u8\norder DHW\n", join(labels.dims));
    write_pair(stem, header, labels.labels.clone())
}

struct Header {
    path: PathBuf,
    fields: BTreeMap<String, String>,
}

impl Header {
    fn read(path: PathBuf) -> Result<Self> {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::format(&path, format!("first line must be {MAGIC:?}")));
        }
        let mut fields = BTreeMap::new();
        for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            if fields.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::format(&path, format!("field {k} repeated")));
            }
        }
        Ok(Self { path, fields })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&self.path, format!("missing field {key}")))
    }

    fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        self.get(key)?
            .split_whitespace()
            .map(|x| {
                x.parse()
                    .map_err(|_| Error::format(&self.path, format!("malformed field {key}: {x:?}")))
            })
            .collect()
    }

    fn expect(&self, key: &str, want: &str) -> Result<()> {
        let got = self.get(key)?;
        if got != want {
            return Err(Error::format(
                &self.path,
                format!("field {key} is {got:?}, expected {want:?}"),
            ));
        }
        Ok(())
    }

    fn dims(&self) -> Result<[usize; 3]> {
        let d: Vec<usize> = self.list("dims")?;
        match d.as_slice() {
            &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
            _ => Err(Error::format(
                &self.path,
                format!("field dims must be three positive extents, got {d:?}"),
            )),
        }
    }
}

fn read_payload(raw: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            raw,
            format!("payload size {} bytes, header declares {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (hdr, raw) = paths(stem);
    let h = Header::read(hdr)?;
    h.expect("dtype", "f32")?;
    h.expect("order", "DHWC")?;
    let dims = h.dims()?;
    let channels: Vec<usize> = h.list("channels")?;
    let channels = match channels.as_slice() {
        &[c] if c > 0 => c,
        _ => return Err(Error::format(&h.path, "field channels must be one positive integer")),
    };
    let stats = match (h.fields.contains_key("norm_mean"), h.fields.contains_key("norm_std")) {
        (false, false) => None,
        (true, true) => {
            let (m, s): (Vec<f32>, Vec<f32>) = (h.list("norm_mean")?, h.list("norm_std")?);
            if m.len() != channels || s.len() != channels {
                return Err(Error::format(
                    &h.path,
                    format!("normalization fields need {channels} values"),
                ));
            }
            Some(
                m.into_iter()
                    .zip(s)
                    .map(|(mean, std)| ChannelStats { mean, std })
                    .collect(),
            )
        }
        _ => return Err(Error::format(&h.path, "norm_mean and norm_std must appear together")),
    };
    let bytes = read_payload(&raw, voxel_count(dims) * channels * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut vol = Volume::new(dims, channels, data)?;
    vol.stats = stats;
    Ok(vol)
}

pub fn read_labels(stem: &Path) -> Result<LabelVolume> {
    let (hdr, raw) = paths(stem);
    let h = Header::read(hdr)?;
    h.expect("dtype", "u8")?;
    h.expect("channels", "1")?;
    h.expect("order", "DHW")?;
    let dims = h.dims()?;
    LabelVolume::new(dims, read_payload(&raw, voxel_count(dims))?)
}
