//! Checkpoint files.
//!
//! A checkpoint with stem `S` is two files:
//!
//! * `S.manifest`: text. The first line is `nlunet-checkpoint 1`; then
//!   `blob<TAB><file name>`, one `config<TAB><key><TAB><value>` line per
//!   network setting, and one line per tensor:
//!   `param|buffer<TAB><name><TAB><d0>x<d1>...<TAB>f32<TAB><byte offset>`.
//! * `S.bin`: every tensor, in manifest order, as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::params::Named;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "nlunet-checkpoint 1";

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "bin")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, stem: &Path) -> Result<()> {
    let blob_file = blob_path(stem);
    let blob_name = blob_file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("invalid checkpoint stem {}", stem.display())))?;
    let mut manifest = format!("{MAGIC}\nblob\t{blob_name}\n");
    for (k, v) in net.config().to_pairs() {
        manifest.push_str(&format!("config\t{k}\t{v}\n"));
    }
    let mut blob: Vec<u8> = Vec::with_capacity(4 * (net.store().count() + 1024));
    let sections: [(&str, &[Named<T>]); 2] = [("param", net.store().params()), ("buffer", net.store().buffers())];
    for (kind, entries) in sections {
        for p in entries {
            manifest.push_str(&format!(
                "{kind}\t{}\t{}\tf32\t{}\n",
                p.name,
                shape_str(p.value.shape()),
                blob.len()
            ));
            for v in p.value.data() {
                blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
    }
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&blob_file, &blob)?;
    write_atomic(&manifest_path(stem), manifest.as_bytes())
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, "tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Entry {
    kind: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn load_checkpoint<T: Scalar>(stem: &Path) -> Result<Network<T>> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(&mpath, "missing checkpoint header"));
    }
    let mut blob_name = None;
    let mut config = Vec::new();
    let mut entries = Vec::new();
    for (no, line) in lines.enumerate() {
        let bad = |why: &str| Error::format(&mpath, format!("line {}: {why}", no + 2));
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["blob", name] => blob_name = Some(name.to_string()),
            ["config", k, v] => config.push((k.to_string(), v.to_string())),
            [kind @ ("param" | "buffer"), name, shape, dtype, offset] => {
                if *dtype != "f32" {
                    return Err(bad(&format!("unsupported dtype {dtype}")));
                }
                let shape = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("malformed shape")))
                        .collect::<Result<_>>()?
                };
                entries.push(Entry {
                    kind: kind.to_string(),
                    name: name.to_string(),
                    shape,
                    offset: offset.parse().map_err(|_| bad("malformed offset"))?,
                });
            }
            [""] => {}
            _ => return Err(bad("unrecognized record")),
        }
    }
    let cfg = NetworkConfig::from_pairs(config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let blob_name = blob_name.ok_or_else(|| Error::format(&mpath, "no blob record"))?;
    let bpath = stem
        .parent()
        .map(|d| d.join(&blob_name))
        .unwrap_or_else(|| PathBuf::from(&blob_name));
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut net = Network::<T>::from_seed(&cfg, 0)?;
    let store = net.store_mut();
    let (n_params, n_buffers) = (store.params().len(), store.buffers().len());
    let found_params = entries.iter().filter(|e| e.kind == "param").count();
    if found_params != n_params || entries.len() - found_params != n_buffers {
        return Err(Error::format(
            &mpath,
            format!(
                "expected {n_params} params and {n_buffers} buffers, found {found_params} and {}",
                entries.len() - found_params
            ),
        ));
    }
    let (pe, be) = entries.split_at(found_params);
    fill(store.params_mut(), pe, &blob, &bpath)?;
    fill(store.buffers_mut(), be, &blob, &bpath)?;
    Ok(net)
}

fn fill<T: Scalar>(dst: &mut [Named<T>], entries: &[Entry], blob: &[u8], bpath: &Path) -> Result<()> {
    for (d, e) in dst.iter_mut().zip(entries) {
        if d.name != e.name || d.value.shape() != e.shape.as_slice() {
            return Err(Error::format(
                bpath,
                format!(
                    "expected {} {:?}, checkpoint has {} {:?}",
                    d.name,
                    d.value.shape(),
                    e.name,
                    e.shape
                ),
            ));
        }
        let n = d.value.len();
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::format(bpath, format!("{} extends past the end of the blob", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        d.value = Tensor::new(e.shape.clone(), data)?;
    }
    Ok(())
}
